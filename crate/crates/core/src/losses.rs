//! Objective terms and their weighted total.

use crate::autograd::{Graph, Var};
use crate::config::{Config, LossTerm};
use crate::error::{Error, Result};
use crate::generator::StyleCode;
use crate::nn::{lrelu, Bound, Conv2d, ParameterStore};
use crate::rng::{stream, Rng};
use crate::tensor::{Float, Tensor};
use crate::types::ImageTensor;

/// Discriminator fusion hinge for one image: with `l = min(0, -1 + p)` for real and
/// `min(0, -1 - p)` for fake inputs, returns `-(l_img + lambda_obj * l_obj)`.
pub fn hinge_d<'g, T: Float>(p_img: Var<'g, T>, p_obj: Var<'g, T>, is_real: bool, lambda_obj: f64) -> Var<'g, T> {
    let margin = |p: Var<'g, T>| {
        let signed = if is_real { p.neg() } else { p };
        signed.add_scalar(1.0).relu().sum()
    };
    margin(p_img) + margin(p_obj).scale(lambda_obj)
}

/// Generator direction: `-(p_img + lambda_obj * p_obj)`.
pub fn hinge_g<'g, T: Float>(p_img: Var<'g, T>, p_obj: Var<'g, T>, lambda_obj: f64) -> Var<'g, T> {
    (p_img.sum() + p_obj.sum().scale(lambda_obj)).neg()
}

/// Mean absolute difference.
pub fn recon_l1<'g, T: Float>(x: Var<'g, T>, y: Var<'g, T>) -> Result<Var<'g, T>> {
    if x.shape() != y.shape() {
        return Err(Error::Shape(format!("L1 between {:?} and {:?}", x.shape(), y.shape())));
    }
    Ok((x - y).abs().mean())
}

/// `sum_i 0.5 * sum_d (mu^2 + exp(logvar) - logvar - 1)`.
pub fn kl_loss<'g, T: Float>(codes: &[StyleCode<'g, T>]) -> Result<Var<'g, T>> {
    if codes.is_empty() {
        return Err(Error::InvalidArgument("KL over no style codes".into()));
    }
    let terms: Vec<_> = codes
        .iter()
        .map(|c| (c.mu.sqr() + c.logvar.exp() - c.logvar).add_scalar(-1.0).sum().scale(0.5))
        .collect();
    Ok(crate::autograd::sum_all(&terms))
}

/// `sum_i || reencoded_mu_i - sampled_i ||_1`.
pub fn latent_recon_l1<'g, T: Float>(reencoded_mu: &[Var<'g, T>], sampled: &[Var<'g, T>]) -> Result<Var<'g, T>> {
    if reencoded_mu.len() != sampled.len() || reencoded_mu.is_empty() {
        return Err(Error::Shape(format!(
            "{} re-encoded codes for {} sampled codes",
            reencoded_mu.len(),
            sampled.len()
        )));
    }
    let terms = reencoded_mu
        .iter()
        .zip(sampled)
        .map(|(&a, &b)| {
            if a.shape() != b.shape() {
                return Err(Error::Shape(format!("style dims {:?} vs {:?}", a.shape(), b.shape())));
            }
            Ok((a - b).abs().sum())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(crate::autograd::sum_all(&terms))
}

/// Frozen random-feature pyramid: three stages of 3x3 conv, leaky ReLU and 2x2 max
/// pooling (3 -> 8 -> 16 -> 32 channels), orthogonally initialized from seed 0.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<T> {
    store: ParameterStore<T>,
    stages: Vec<Conv2d>,
}

pub const PYRAMID_CHANNELS: [usize; 4] = [3, 8, 16, 32];

impl<T: Float> Default for FeaturePyramid<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> FeaturePyramid<T> {
    pub fn new() -> Self {
        let mut store = ParameterStore::new();
        let mut rng = Rng::new(0, stream::PERCEPTUAL);
        let stages = PYRAMID_CHANNELS
            .windows(2)
            .enumerate()
            .map(|(k, w)| Conv2d::new(&mut store, &mut rng, &format!("phi.stage{k}"), w[0], w[1], 3, 1))
            .collect();
        Self { store, stages }
    }

    pub fn store(&self) -> &ParameterStore<T> {
        &self.store
    }

    /// Features after each stage, for a `[3, H, W]` input with H, W divisible by 8.
    pub fn features<'g>(&self, graph: &'g Graph<T>, img: Var<'g, T>) -> Vec<Var<'g, T>> {
        let p = Bound::frozen(graph, &self.store);
        let mut x = img;
        self.stages
            .iter()
            .map(|conv| {
                x = lrelu(conv.forward(&p, x)).max_pool2x2();
                x
            })
            .collect()
    }

    /// Feature tensors of an image, outside any training graph.
    pub fn image_features(&self, img: &ImageTensor) -> Vec<Tensor<T>> {
        let g = Graph::new();
        self.features(&g, g.constant(img.to_chw()))
            .iter()
            .map(|v| (*v.value()).clone())
            .collect()
    }

    /// `sum_k mean | phi_k(y) - phi_k(g) |`.
    pub fn perceptual_loss<'g>(&self, graph: &'g Graph<T>, y: Var<'g, T>, g: Var<'g, T>) -> Result<Var<'g, T>> {
        if y.shape() != g.shape() {
            return Err(Error::Shape(format!("perceptual loss between {:?} and {:?}", y.shape(), g.shape())));
        }
        let fy = self.features(graph, y);
        let fg = self.features(graph, g);
        let terms: Vec<_> = fy.iter().zip(&fg).map(|(&a, &b)| (a - b).abs().mean()).collect();
        Ok(crate::autograd::sum_all(&terms))
    }
}

/// Values of the five generator terms, indexed like [`LossTerm::ALL`]. Disabled terms
/// are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub adv: Option<f64>,
    pub recon_img: Option<f64>,
    pub kl: Option<f64>,
    pub recon_latent: Option<f64>,
    pub perceptual: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn get(&self, term: LossTerm) -> Option<f64> {
        match term {
            LossTerm::Adv => self.adv,
            LossTerm::ReconImg => self.recon_img,
            LossTerm::Kl => self.kl,
            LossTerm::ReconLatent => self.recon_latent,
            LossTerm::Perceptual => self.perceptual,
        }
    }

    fn slot(&mut self, term: LossTerm) -> &mut Option<f64> {
        match term {
            LossTerm::Adv => &mut self.adv,
            LossTerm::ReconImg => &mut self.recon_img,
            LossTerm::Kl => &mut self.kl,
            LossTerm::ReconLatent => &mut self.recon_latent,
            LossTerm::Perceptual => &mut self.perceptual,
        }
    }
}

/// Weighted total over enabled terms; disabled ones are reported as absent.
pub fn total_loss(parts: [f64; 5], cfg: &Config) -> LossBreakdown {
    let mut out = LossBreakdown::default();
    for (term, value) in LossTerm::ALL.into_iter().zip(parts) {
        if !cfg.is_disabled(term) {
            *out.slot(term) = Some(value);
            out.total += cfg.weight(term) * value;
        }
    }
    out
}

/// Graph version of [`total_loss`]: `None` entries (or disabled terms) are skipped.
pub fn weighted_total<'g, T: Float>(graph: &'g Graph<T>, parts: [Option<Var<'g, T>>; 5], cfg: &Config) -> Var<'g, T> {
    let terms: Vec<_> = LossTerm::ALL
        .into_iter()
        .zip(parts)
        .filter(|(t, _)| !cfg.is_disabled(*t))
        .filter_map(|(t, v)| v.map(|v| v.sum().scale(cfg.weight(t))))
        .collect();
    if terms.is_empty() {
        graph.constant(Tensor::scalar(T::ZERO))
    } else {
        crate::autograd::sum_all(&terms)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::check_fn;

    fn s(g: &Graph<f64>, v: f64) -> Var<'_, f64> {
        g.constant(Tensor::scalar(v))
    }

    #[test]
    fn hinge_d_values() {
        let g = Graph::new();
        assert_eq!(hinge_d(s(&g, 2.0), s(&g, 2.0), true, 1.0).item(), 0.0);
        assert!((hinge_d(s(&g, 0.5), s(&g, 0.5), true, 1.0).item() - 1.0).abs() < 1e-12);
        assert_eq!(hinge_d(s(&g, -2.0), s(&g, -2.0), false, 1.0).item(), 0.0);
        assert!((hinge_d(s(&g, 0.0), s(&g, 0.0), false, 1.0).item() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn hinge_d_gradient_vanishes_when_saturated() {
        for (p, real, live) in [(1.5, true, false), (0.5, true, true), (-1.5, false, false), (-0.5, false, true)] {
            let g = Graph::new();
            let x = g.leaf(Tensor::scalar(p));
            let l = hinge_d(x, g.constant(Tensor::scalar(if real { 5.0 } else { -5.0 })), real, 1.0);
            let grad = g.backward(l).get(x).unwrap().data()[0];
            assert_eq!(grad != 0.0, live, "p={p} real={real}");
        }
    }

    #[test]
    fn hinge_g_values_and_monotonicity() {
        let g = Graph::new();
        assert_eq!(hinge_g(s(&g, 0.0), s(&g, 0.0), 1.0).item(), 0.0);
        assert_eq!(hinge_g(s(&g, 1.0), s(&g, 1.0), 1.0).item(), -2.0);
        let mut prev = f64::INFINITY;
        for p in [-3.0, -1.0, 0.0, 2.0, 10.0] {
            let v = hinge_g(s(&g, p), s(&g, 0.3), 1.0).item();
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn l1_values() {
        let g = Graph::<f64>::new();
        let mut r = Rng::new(1, 1);
        let a = Tensor::from_f64(&[3, 4, 4], &r.normals(48));
        let b = a.map(|v| v + 0.5);
        let (va, vb) = (g.constant(a.clone()), g.constant(b));
        assert_eq!(recon_l1(va, va).unwrap().item(), 0.0);
        assert!((recon_l1(vb, va).unwrap().item() - 0.5).abs() < 1e-12);
        let c = Tensor::from_f64(&[3, 4, 4], &r.normals(48));
        let brute: f64 = a.data().iter().zip(c.data()).map(|(x, y): (&f64, &f64)| (x - y).abs()).sum::<f64>() / 48.0;
        assert!((recon_l1(va, g.constant(c)).unwrap().item() - brute).abs() < 1e-12);
        assert!(recon_l1(va, g.constant(Tensor::zeros(&[3, 4]))).is_err());
    }

    fn code<'g>(g: &'g Graph<f64>, mu: &[f64], logvar: &[f64]) -> StyleCode<'g, f64> {
        StyleCode {
            mu: g.constant(Tensor::from_f64(&[mu.len()], mu)),
            logvar: g.constant(Tensor::from_f64(&[logvar.len()], logvar)),
            sample: g.constant(Tensor::from_f64(&[mu.len()], mu)),
        }
    }

    #[test]
    fn kl_values() {
        let g = Graph::new();
        assert_eq!(kl_loss(&[code(&g, &[0.0, 0.0], &[0.0, 0.0])]).unwrap().item(), 0.0);
        assert!((kl_loss(&[code(&g, &[1.0], &[0.0])]).unwrap().item() - 0.5).abs() < 1e-12);
        let one = code(&g, &[0.3, -1.2], &[0.4, -0.7]);
        let single = kl_loss(&[one]).unwrap().item();
        let many = kl_loss(&[one, one, one, one]).unwrap().item();
        assert!((many - 4.0 * single).abs() < 1e-12);
        assert!(single > 0.0);
    }

    #[test]
    fn latent_recon_values() {
        let g = Graph::<f64>::new();
        let v = |x: &[f64]| g.constant(Tensor::from_f64(&[x.len()], x));
        let a = [v(&[0.1, 0.2]), v(&[-1.0, 3.0])];
        assert_eq!(latent_recon_l1(&a, &a).unwrap().item(), 0.0);
        let b = [v(&[0.1, 0.2]), v(&[-1.0, 4.0])];
        assert!((latent_recon_l1(&a, &b).unwrap().item() - 1.0).abs() < 1e-12);
        let mut r = Rng::new(3, 3);
        let xs: Vec<Vec<f64>> = (0..6).map(|_| r.normals(4)).collect();
        let brute: f64 = (0..3)
            .map(|i| xs[i].iter().zip(&xs[i + 3]).map(|(p, q)| (p - q).abs()).sum::<f64>())
            .sum();
        let lhs: Vec<_> = xs[..3].iter().map(|x| v(x)).collect();
        let rhs: Vec<_> = xs[3..].iter().map(|x| v(x)).collect();
        assert!((latent_recon_l1(&lhs, &rhs).unwrap().item() - brute).abs() < 1e-12);
        assert!(latent_recon_l1(&lhs[..2], &rhs).is_err());
    }

    #[test]
    fn perceptual_identity_symmetry_and_brute_force() {
        let phi = FeaturePyramid::<f64>::new();
        let g = Graph::new();
        let mut r = Rng::new(5, 5);
        let a = Tensor::from_f64(&[3, 16, 16], &r.normals(768));
        let b = Tensor::from_f64(&[3, 16, 16], &r.normals(768));
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        assert_eq!(phi.perceptual_loss(&g, va, va).unwrap().item(), 0.0);
        let ab = phi.perceptual_loss(&g, va, vb).unwrap().item();
        let ba = phi.perceptual_loss(&g, vb, va).unwrap().item();
        assert_eq!(ab, ba);
        // independent re-implementation: direct convolution, leaky ReLU, max pool
        let stage = |x: &[f64], c: usize, n: usize, k: usize| -> Vec<f64> {
            let w = phi.store().get(&format!("phi.stage{k}.weight"));
            let bias = phi.store().get(&format!("phi.stage{k}.bias"));
            let co = w.shape()[0];
            let at = |ch: usize, y: isize, xx: isize| {
                let y = y.clamp(0, n as isize - 1) as usize;
                let xx = xx.clamp(0, n as isize - 1) as usize;
                x[(ch * n + y) * n + xx]
            };
            let mut conv = vec![0.0; co * n * n];
            for o in 0..co {
                for y in 0..n {
                    for xx in 0..n {
                        let mut acc = bias.data()[o];
                        for ch in 0..c {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    acc += w.data()[((o * c + ch) * 3 + ky) * 3 + kx]
                                        * at(ch, y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                }
                            }
                        }
                        conv[(o * n + y) * n + xx] = if acc > 0.0 { acc } else { 0.2 * acc };
                    }
                }
            }
            let h = n / 2;
            let mut out = vec![0.0; co * h * h];
            for o in 0..co {
                for y in 0..h {
                    for xx in 0..h {
                        let v = |dy: usize, dx: usize| conv[(o * n + 2 * y + dy) * n + 2 * xx + dx];
                        out[(o * h + y) * h + xx] = v(0, 0).max(v(0, 1)).max(v(1, 0)).max(v(1, 1));
                    }
                }
            }
            out
        };
        let pyramid = |img: &Tensor<f64>| {
            let mut feats = Vec::new();
            let mut x = img.data().to_vec();
            let mut n = 16;
            for k in 0..3 {
                x = stage(&x, PYRAMID_CHANNELS[k], n, k);
                n /= 2;
                feats.push(x.clone());
            }
            feats
        };
        let (fa, fb) = (pyramid(&a), pyramid(&b));
        let brute: f64 = fa
            .iter()
            .zip(&fb)
            .map(|(p, q)| p.iter().zip(q).map(|(x, y)| (x - y).abs()).sum::<f64>() / p.len() as f64)
            .sum();
        assert!((ab - brute).abs() < 1e-10, "{ab} vs {brute}");
    }

    #[test]
    fn totals() {
        let paper = Config::paper();
        let all = total_loss([1.0; 5], &paper);
        assert!((all.total - 4.1).abs() < 1e-12);
        let mut off = paper.clone();
        for t in LossTerm::ALL {
            off.set_disabled(t, true);
        }
        let none = total_loss([1.0; 5], &off);
        assert_eq!(none.total, 0.0);
        assert!(LossTerm::ALL.iter().all(|&t| none.get(t).is_none()));
        let parts = [3.0, 0.2, 0.7, 1.1, 0.4];
        let mut no_adv = paper.clone();
        no_adv.disable_adv = true;
        let full = total_loss(parts, &paper).total;
        let cut = total_loss(parts, &no_adv);
        assert!((full - cut.total - 0.1 * 3.0).abs() < 1e-12);
        assert_eq!(cut.adv, None);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut r = Rng::new(8, 8);
        let p = Tensor::from_f64(&[4], &[0.3, -0.6, 1.7, -2.2]);
        let err = check_fn(&[p], |_, v| {
            hinge_d(v[0].index(0), v[0].index(1), true, 0.7)
                + hinge_d(v[0].index(2), v[0].index(3), false, 1.3)
                + hinge_g(v[0].index(0), v[0].index(3), 0.5)
        });
        assert!(err < 1e-4, "hinge {err}");
        let x = Tensor::from_f64(&[3, 8, 8], &r.normals(192));
        let y = Tensor::from_f64(&[3, 8, 8], &r.normals(192));
        let err = check_fn(&[x.clone(), y.clone()], |_, v| recon_l1(v[0], v[1]).unwrap());
        assert!(err < 1e-4, "l1 {err}");
        let mu = Tensor::from_f64(&[3], &r.normals(3));
        let lv = Tensor::from_f64(&[3], &r.normals(3));
        let target = Tensor::from_f64(&[3], &r.normals(3));
        let err = check_fn(&[mu, lv], |g, v| {
            let c = StyleCode {
                mu: v[0],
                logvar: v[1],
                sample: v[0],
            };
            kl_loss(&[c]).unwrap() + latent_recon_l1(&[v[0]], &[g.constant(target.clone())]).unwrap()
        });
        assert!(err < 1e-4, "kl/latent {err}");
        let phi = FeaturePyramid::<f64>::new();
        let err = check_fn(&[x, y], |g, v| phi.perceptual_loss(g, v[0], v[1]).unwrap());
        assert!(err < 1e-4, "perceptual {err}");
    }
}
