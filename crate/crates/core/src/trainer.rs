//! Four-stream adversarial training, Adam, checkpoints and the training loop.
//!
//! Each iteration runs, per sample, the within-domain streams `t2t` and `c2c`
//! (encoded styles) and the cross-domain streams `t2c` and `c2t` (prior styles). The
//! discriminators are updated first on the detached fakes, then the generators are
//! updated against the freshly updated, frozen discriminators.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::config::{Config, LossTerm};
use crate::discriminator::{class_log_likelihood, object_score, Discriminator, DiscriminatorOutput};
use crate::error::{Error, Result};
use crate::generator::{reconstruct, sample_style_prior, translate, Generator, StyleCode};
use crate::losses::{
    hinge_d, hinge_g, kl_loss, latent_recon_l1, recon_l1, total_loss, weighted_total, FeaturePyramid, LossBreakdown,
};
use crate::nn::params::FormatError;
use crate::nn::{Bound, ParameterStore};
use crate::rng::{stream, Rng, RngState};
use crate::synthdata::{read_dataset, write_image_png, Sample};
use crate::types::ImageTensor;

pub const CKPT_MAGIC: &[u8; 8] = b"POSACKPT";
pub const CKPT_VERSION: u32 = 1;
const ADAM_EPS: f64 = 1e-8;
/// Number of leading dataset samples used for the L1 probe.
pub const PROBE_SAMPLES: usize = 8;
/// Extra probe point early in training, used as the baseline for progress checks.
pub const EARLY_PROBE: u64 = 10;

/// Module definitions for both domains. Parameters live in [`TrainState`].
#[derive(Clone, Debug)]
pub struct Networks {
    pub gen_t: Generator,
    pub gen_c: Generator,
    pub disc_t: Discriminator,
    pub disc_c: Discriminator,
    pub phi: FeaturePyramid<f32>,
}

/// Adam moments for one parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParameterStore<f32>,
    pub v: ParameterStore<f32>,
    pub steps: u64,
}

impl AdamState {
    pub fn new(like: &ParameterStore<f32>) -> Self {
        Self {
            m: like.zeros_like(),
            v: like.zeros_like(),
            steps: 0,
        }
    }

    /// One Adam update of `params` with `grads`.
    pub fn update(&mut self, params: &mut ParameterStore<f32>, grads: &ParameterStore<f32>, lr: f64, beta1: f64, beta2: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let names: Vec<String> = params.names().map(str::to_owned).collect();
        for name in names {
            let g = grads.get(&name).data();
            let m = self.m.get_mut(&name).data_mut();
            let v = self.v.get_mut(&name).data_mut();
            let p = params.get_mut(&name).data_mut();
            for i in 0..p.len() {
                let gi = g[i] as f64;
                let mi = beta1 * m[i] as f64 + (1.0 - beta1) * gi;
                let vi = beta2 * v[i] as f64 + (1.0 - beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let step = lr * (mi / c1) / ((vi / c2).sqrt() + ADAM_EPS);
                p[i] = (p[i] as f64 - step) as f32;
            }
        }
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub cfg: Config,
    pub gen_t: ParameterStore<f32>,
    pub gen_c: ParameterStore<f32>,
    pub disc_t: ParameterStore<f32>,
    pub disc_c: ParameterStore<f32>,
    pub opt_gen_t: AdamState,
    pub opt_gen_c: AdamState,
    pub opt_disc_t: AdamState,
    pub opt_disc_c: AdamState,
    /// Completed training steps.
    pub iteration: u64,
    /// Reparameterization and prior-style noise.
    pub rng: Rng,
}

impl Networks {
    pub fn new(cfg: &Config) -> Result<Self> {
        Ok(Self::with_stores(cfg)?.0)
    }

    fn with_stores(cfg: &Config) -> Result<(Self, [ParameterStore<f32>; 4])> {
        let mut stores: [ParameterStore<f32>; 4] = Default::default();
        let [st, sc, sdt, sdc] = &mut stores;
        let gen_t = Generator::new(cfg, st, &mut Rng::new(cfg.seed, stream::INIT_GEN_T))?;
        let gen_c = Generator::new(cfg, sc, &mut Rng::new(cfg.seed, stream::INIT_GEN_C))?;
        let disc_t = Discriminator::new(cfg, sdt, &mut Rng::new(cfg.seed, stream::INIT_DISC_T))?;
        let disc_c = Discriminator::new(cfg, sdc, &mut Rng::new(cfg.seed, stream::INIT_DISC_C))?;
        let nets = Self {
            gen_t,
            gen_c,
            disc_t,
            disc_c,
            phi: FeaturePyramid::new(),
        };
        Ok((nets, stores))
    }
}

impl TrainState {
    /// Freshly initialized state (iteration 0).
    pub fn new(cfg: &Config) -> Result<(Networks, Self)> {
        let (nets, [gen_t, gen_c, disc_t, disc_c]) = Networks::with_stores(cfg)?;
        let state = Self {
            cfg: cfg.clone(),
            opt_gen_t: AdamState::new(&gen_t),
            opt_gen_c: AdamState::new(&gen_c),
            opt_disc_t: AdamState::new(&disc_t),
            opt_disc_c: AdamState::new(&disc_c),
            gen_t,
            gen_c,
            disc_t,
            disc_c,
            iteration: 0,
            rng: Rng::new(cfg.seed, stream::TRAIN),
        };
        Ok((nets, state))
    }

    fn stores(&self) -> [&ParameterStore<f32>; 12] {
        [
            &self.gen_t,
            &self.gen_c,
            &self.disc_t,
            &self.disc_c,
            &self.opt_gen_t.m,
            &self.opt_gen_t.v,
            &self.opt_gen_c.m,
            &self.opt_gen_c.v,
            &self.opt_disc_t.m,
            &self.opt_disc_t.v,
            &self.opt_disc_c.m,
            &self.opt_disc_c.v,
        ]
    }
}

/// Losses of one step, averaged over the batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    /// Generator terms and weighted total.
    pub generator: LossBreakdown,
    /// Discriminator objective; `None` when the adversarial term is disabled.
    pub discriminator: Option<DiscLosses>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscLosses {
    /// Mean over both domains of `(hinge_d(real) + hinge_d(fake)) / 2`.
    pub adv: f64,
    /// Mean over both domains of the real-object classification cross-entropy.
    pub class: f64,
    pub total: f64,
}

struct Streams<'g> {
    t: Var<'g, f32>,
    c: Var<'g, f32>,
    t2t: Var<'g, f32>,
    c2c: Var<'g, f32>,
    t2c: Var<'g, f32>,
    c2t: Var<'g, f32>,
    styles_t: Vec<StyleCode<'g, f32>>,
    styles_c: Vec<StyleCode<'g, f32>>,
    /// Prior draws decoded into `t2c` and `c2t`.
    prior_tc: Vec<Var<'g, f32>>,
    prior_ct: Vec<Var<'g, f32>>,
}

fn samples<'g>(codes: &[StyleCode<'g, f32>]) -> Vec<Var<'g, f32>> {
    codes.iter().map(|s| s.sample).collect()
}

fn run_streams<'g>(
    nets: &Networks,
    pt: &Bound<'g, '_, f32>,
    pc: &Bound<'g, '_, f32>,
    sample: &Sample,
    rng: &mut Rng,
) -> Result<Streams<'g>> {
    let g = pt.graph();
    let map = &sample.panoptic;
    let t = g.constant(sample.a.to_chw());
    let c = g.constant(sample.b.to_chw());
    let codes_t = nets.gen_t.encode_content(pt, t, map)?;
    let codes_c = nets.gen_c.encode_content(pc, c, map)?;
    let styles_t = nets.gen_t.encode_style(pt, &codes_t, rng)?;
    let styles_c = nets.gen_c.encode_style(pc, &codes_c, rng)?;
    let t2t = nets.gen_t.decode(pt, &codes_t, map, &samples(&styles_t))?;
    let c2c = nets.gen_c.decode(pc, &codes_c, map, &samples(&styles_c))?;
    let cfg = nets.gen_t.config();
    let prior_tc = samples(&sample_style_prior(g, map.len(), cfg, rng));
    let prior_ct = samples(&sample_style_prior(g, map.len(), cfg, rng));
    let t2c = nets.gen_c.decode(pc, &codes_t, map, &prior_tc)?;
    let c2t = nets.gen_t.decode(pt, &codes_c, map, &prior_ct)?;
    Ok(Streams {
        t,
        c,
        t2t,
        c2c,
        t2c,
        c2t,
        styles_t,
        styles_c,
        prior_tc,
        prior_ct,
    })
}

/// Generator terms other than the adversarial one, indexed like [`LossTerm::ALL`].
fn generator_terms<'g>(
    nets: &Networks,
    pt: &Bound<'g, '_, f32>,
    pc: &Bound<'g, '_, f32>,
    s: &Streams<'g>,
    sample: &Sample,
) -> Result<[Option<Var<'g, f32>>; 5]> {
    let cfg = nets.gen_t.config();
    let g = pt.graph();
    let map = &sample.panoptic;
    let mut parts: [Option<Var<'g, f32>>; 5] = [None; 5];
    if !cfg.disable_recon_img {
        let mut v = recon_l1(s.t2t, s.t)? + recon_l1(s.c2c, s.c)?;
        if cfg.recon_cross_domain {
            v = v + recon_l1(s.t2c, s.c)? + recon_l1(s.c2t, s.t)?;
        }
        parts[1] = Some(v);
    }
    if !cfg.disable_kl {
        parts[2] = Some(kl_loss(&s.styles_t)? + kl_loss(&s.styles_c)?);
    }
    if !cfg.disable_recon_latent {
        let mu = |gen: &Generator, p: &Bound<'g, '_, f32>, img| -> Result<Vec<Var<'g, f32>>> {
            Ok(gen.encode_content(p, img, map)?.into_iter().map(|c| gen.style_stats(p, c).0).collect())
        };
        let tc = latent_recon_l1(&mu(&nets.gen_c, pc, s.t2c)?, &s.prior_tc)?;
        let ct = latent_recon_l1(&mu(&nets.gen_t, pt, s.c2t)?, &s.prior_ct)?;
        parts[3] = Some(tc + ct);
    }
    if !cfg.disable_perceptual {
        let v = nets.phi.perceptual_loss(g, s.c, s.t2c)? + nets.phi.perceptual_loss(g, s.t, s.c2t)?;
        parts[4] = Some(v);
    }
    Ok(parts)
}

fn adversarial_pair<'g>(
    out_real: &DiscriminatorOutput<'g, f32>,
    out_fake: &DiscriminatorOutput<'g, f32>,
    categories: &[usize],
    lambda_obj: f64,
) -> Result<(Var<'g, f32>, Var<'g, f32>)> {
    let real = hinge_d(out_real.s_img, out_real.s_real.mean(), true, lambda_obj);
    let fake = hinge_d(out_fake.s_img, out_fake.s_real.mean(), false, lambda_obj);
    let ce = class_log_likelihood(out_real.s_cls, categories)?.neg();
    Ok(((real + fake).scale(0.5), ce))
}

fn generator_hinge<'g>(out: &DiscriminatorOutput<'g, f32>, categories: &[usize], lambda_obj: f64) -> Result<Var<'g, f32>> {
    Ok(hinge_g(out.s_img, object_score(out, categories)?, lambda_obj))
}

fn check_finite(term: &str, value: f64, iteration: u64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite {
            term: term.to_owned(),
            iteration,
        })
    }
}

fn accumulate(into: &mut ParameterStore<f32>, grads: &ParameterStore<f32>, scale: f32) {
    for (name, t) in into.iter_mut() {
        for (a, b) in t.data_mut().iter_mut().zip(grads.get(name).data()) {
            *a += scale * b;
        }
    }
}

/// One discriminator step followed by one generator step on `batch`.
pub fn train_step(nets: &Networks, state: &mut TrainState, batch: &[&Sample]) -> Result<StepLosses> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    let cfg = state.cfg.clone();
    let it = state.iteration + 1;
    let inv_b = 1.0 / batch.len() as f64;
    let adv_on = !cfg.disable_adv;
    let graphs: Vec<Graph<f32>> = batch.iter().map(|_| Graph::new()).collect();
    let mut grad_t = state.gen_t.zeros_like();
    let mut grad_c = state.gen_c.zeros_like();
    let mut parts_sum = [0.0f64; 5];
    let mut disc = None;
    {
        let bounds: Vec<_> = graphs
            .iter()
            .map(|g| (Bound::trainable(g, &state.gen_t), Bound::trainable(g, &state.gen_c)))
            .collect();
        let mut streams = Vec::with_capacity(batch.len());
        for ((pt, pc), s) in bounds.iter().zip(batch) {
            streams.push(run_streams(nets, pt, pc, s, &mut state.rng)?);
        }

        if adv_on {
            let mut gd_t = state.disc_t.zeros_like();
            let mut gd_c = state.disc_c.zeros_like();
            let (mut adv, mut class) = (0.0, 0.0);
            for (st, s) in streams.iter().zip(batch) {
                let g = Graph::new();
                let pdt = Bound::trainable(&g, &state.disc_t);
                let pdc = Bound::trainable(&g, &state.disc_c);
                let map = &s.panoptic;
                let cats = map.categories();
                let fake_t = g.constant((*st.c2t.value()).clone());
                let fake_c = g.constant((*st.t2c.value()).clone());
                let (adv_t, ce_t) = adversarial_pair(
                    &nets.disc_t.discriminate(&pdt, g.constant(s.a.to_chw()), map)?,
                    &nets.disc_t.discriminate(&pdt, fake_t, map)?,
                    &cats,
                    cfg.lambda_obj,
                )?;
                let (adv_c, ce_c) = adversarial_pair(
                    &nets.disc_c.discriminate(&pdc, g.constant(s.b.to_chw()), map)?,
                    &nets.disc_c.discriminate(&pdc, fake_c, map)?,
                    &cats,
                    cfg.lambda_obj,
                )?;
                let adv_v = (adv_t + adv_c).scale(0.5);
                let ce_v = (ce_t + ce_c).scale(0.5);
                adv += check_finite("adv_d", adv_v.item() as f64, it)?;
                class += check_finite("class_d", ce_v.item() as f64, it)?;
                let grads = g.backward(adv_v + ce_v);
                accumulate(&mut gd_t, &pdt.grads(&grads), inv_b as f32);
                accumulate(&mut gd_c, &pdc.grads(&grads), inv_b as f32);
            }
            let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
            state.opt_disc_t.update(&mut state.disc_t, &gd_t, cfg.lr_D, b1, b2);
            state.opt_disc_c.update(&mut state.disc_c, &gd_c, cfg.lr_D, b1, b2);
            let (adv, class) = (adv * inv_b, class * inv_b);
            disc = Some(DiscLosses {
                adv,
                class,
                total: adv + class,
            });
        }

        for (((pt, pc), st), s) in bounds.iter().zip(&streams).zip(batch) {
            let g = pt.graph();
            let mut parts = generator_terms(nets, pt, pc, st, s)?;
            if adv_on {
                let pdt = Bound::frozen(g, &state.disc_t);
                let pdc = Bound::frozen(g, &state.disc_c);
                let map = &s.panoptic;
                let cats = map.categories();
                let tc = generator_hinge(&nets.disc_c.discriminate(&pdc, st.t2c, map)?, &cats, cfg.lambda_obj)?;
                let ct = generator_hinge(&nets.disc_t.discriminate(&pdt, st.c2t, map)?, &cats, cfg.lambda_obj)?;
                parts[0] = Some((tc + ct).scale(0.5));
            }
            for (k, term) in LossTerm::ALL.into_iter().enumerate() {
                if let Some(v) = parts[k] {
                    parts_sum[k] += check_finite(term.name(), v.item() as f64, it)?;
                }
            }
            let total = weighted_total(g, parts, &cfg);
            let grads = g.backward(total);
            accumulate(&mut grad_t, &pt.grads(&grads), inv_b as f32);
            accumulate(&mut grad_c, &pc.grads(&grads), inv_b as f32);
        }
    }
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    state.opt_gen_t.update(&mut state.gen_t, &grad_t, cfg.lr_G, b1, b2);
    state.opt_gen_c.update(&mut state.gen_c, &grad_c, cfg.lr_G, b1, b2);
    state.iteration = it;
    let generator = total_loss(parts_sum.map(|v| v * inv_b), &cfg);
    check_finite("total_g", generator.total, it)?;
    Ok(StepLosses {
        generator,
        discriminator: disc,
    })
}

/// Shuffled batch indices for an iteration (1-based): a pure function of the seed,
/// the dataset size and the iteration.
pub fn batch_indices(seed: u64, n: usize, batch_size: usize, iteration: u64) -> Vec<usize> {
    let start = (iteration - 1) as usize * batch_size;
    let mut epoch = usize::MAX;
    let mut perm = Vec::new();
    (start..start + batch_size)
        .map(|pos| {
            if pos / n != epoch {
                epoch = pos / n;
                perm = Rng::derive(seed, stream::SHUFFLE, epoch as u64).permutation(n);
            }
            perm[pos % n]
        })
        .collect()
}

/// One row of `losses.csv`. Absent values are written as `NA`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: u64,
    pub losses: StepLosses,
}

pub const CSV_HEADER: &str = "iteration,adv_d,adv_g,recon_img,kl,recon_latent,perceptual,total_g,total_d";

impl LogRow {
    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "NA".to_owned(), |x| format!("{x:e}"));
        let g = &self.losses.generator;
        let d = self.losses.discriminator;
        [
            self.iteration.to_string(),
            f(d.map(|d| d.adv)),
            f(g.adv),
            f(g.recon_img),
            f(g.kl),
            f(g.recon_latent),
            f(g.perceptual),
            f(Some(g.total)),
            f(d.map(|d| d.total)),
        ]
        .join(",")
    }
}

/// Mean L1 of the four streams on the probe samples, in `[-1, 1]` pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeL1 {
    pub iteration: u64,
    pub t2t: f64,
    pub c2c: f64,
    pub t2c: f64,
    pub c2t: f64,
}

/// The four outputs of one sample: `[t2c, c2t, t2t, c2c]`.
pub fn stream_images(nets: &Networks, state: &TrainState, sample: &Sample, rng: &mut Rng) -> Result<[ImageTensor; 4]> {
    let map = &sample.panoptic;
    let t = (&nets.gen_t, &state.gen_t);
    let c = (&nets.gen_c, &state.gen_c);
    Ok([
        translate(t, c, &sample.a, map, rng)?,
        translate(c, t, &sample.b, map, rng)?,
        reconstruct(t, &sample.a, map)?,
        reconstruct(c, &sample.b, map)?,
    ])
}

/// Probe L1 on `samples`; cross-domain styles come from a fixed probe stream so the
/// value is comparable across iterations.
pub fn probe(nets: &Networks, state: &TrainState, samples: &[&Sample]) -> Result<ProbeL1> {
    let mut rng = Rng::new(state.cfg.seed, stream::PROBE);
    let mut acc = [0.0; 4];
    for s in samples {
        let [t2c, c2t, t2t, c2c] = stream_images(nets, state, s, &mut rng)?;
        acc[0] += t2t.mean_abs_diff(&s.a)?;
        acc[1] += c2c.mean_abs_diff(&s.b)?;
        acc[2] += t2c.mean_abs_diff(&s.b)?;
        acc[3] += c2t.mean_abs_diff(&s.a)?;
    }
    let n = samples.len().max(1) as f64;
    Ok(ProbeL1 {
        iteration: state.iteration,
        t2t: acc[0] / n,
        c2c: acc[1] / n,
        t2c: acc[2] / n,
        c2t: acc[3] / n,
    })
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub state: TrainState,
    pub log: Vec<LogRow>,
    pub probes: Vec<ProbeL1>,
    pub checkpoints: Vec<PathBuf>,
    pub sample_images: Vec<PathBuf>,
}

pub fn checkpoint_path(out_dir: &Path, iteration: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("iter_{iteration:06}.ckpt"))
}

/// Train from scratch on the dataset in `dataset_dir`, writing artifacts to `out_dir`.
pub fn fit(cfg: &Config, dataset_dir: &Path, out_dir: &Path) -> Result<FitOutcome> {
    let samples = read_dataset(dataset_dir, cfg)?;
    let (nets, state) = TrainState::new(cfg)?;
    run(&nets, state, &samples, out_dir)
}

/// Continue `state` until `state.cfg.iterations`. When resuming (iteration > 0) rows
/// are appended to an existing `losses.csv`.
pub fn run(nets: &Networks, mut state: TrainState, samples: &[Sample], out_dir: &Path) -> Result<FitOutcome> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("training needs at least one sample".into()));
    }
    let cfg = state.cfg.clone();
    let ckpt_dir = out_dir.join("checkpoints");
    let sample_dir = out_dir.join("samples");
    for d in [&ckpt_dir, &sample_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let csv_path = out_dir.join("losses.csv");
    let probe_path = out_dir.join("probes.csv");
    let resuming = state.iteration > 0 && csv_path.exists();
    let mut csv = open_log(&csv_path, CSV_HEADER, resuming)?;
    let mut probe_log = open_log(&probe_path, PROBE_HEADER, resuming)?;
    let probe_set: Vec<&Sample> = samples.iter().take(PROBE_SAMPLES).collect();
    let mut out = FitOutcome {
        state: state.clone(),
        log: Vec::new(),
        probes: Vec::new(),
        checkpoints: Vec::new(),
        sample_images: Vec::new(),
    };
    let periodic = |it: u64, every: u64| it > 0 && every > 0 && it % every == 0;
    let mut record = |nets: &Networks, state: &TrainState, out: &mut FitOutcome, last: bool| -> Result<()> {
        let it = state.iteration;
        if it == EARLY_PROBE || periodic(it, cfg.sample_every) || last || it == 0 {
            let p = probe(nets, state, &probe_set)?;
            writeln!(probe_log, "{},{:e},{:e},{:e},{:e}", p.iteration, p.t2t, p.c2c, p.t2c, p.c2t)
                .and_then(|_| probe_log.flush())
                .map_err(|e| Error::io(&probe_path, e))?;
            out.probes.push(p);
        }
        if periodic(it, cfg.sample_every) || last {
            let mut rng = Rng::new(cfg.seed, stream::PROBE);
            let imgs = stream_images(nets, state, &samples[0], &mut rng)?;
            for (img, tag) in imgs.iter().zip(["t2c", "c2t", "t2t", "c2c"]) {
                let p = sample_dir.join(format!("iter_{it:06}_{tag}.png"));
                write_image_png(&p, img)?;
                out.sample_images.push(p);
            }
        }
        if periodic(it, cfg.checkpoint_every) || last {
            let p = checkpoint_path(out_dir, it);
            save_checkpoint(state, &p)?;
            out.checkpoints.push(p);
        }
        Ok(())
    };
    if state.iteration == 0 {
        record(nets, &state, &mut out, cfg.iterations == 0)?;
    }
    while state.iteration < cfg.iterations {
        let idx = batch_indices(cfg.seed, samples.len(), cfg.batch_size, state.iteration + 1);
        let batch: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
        let losses = train_step(nets, &mut state, &batch)?;
        let row = LogRow {
            iteration: state.iteration,
            losses,
        };
        writeln!(csv, "{}", row.to_csv())
            .and_then(|_| csv.flush())
            .map_err(|e| Error::io(&csv_path, e))?;
        out.log.push(row);
        record(nets, &state, &mut out, state.iteration == cfg.iterations)?;
    }
    out.checkpoints.dedup();
    out.state = state;
    Ok(out)
}

pub const PROBE_HEADER: &str = "iteration,t2t,c2c,t2c,c2t";

fn open_log(path: &Path, header: &str, append: bool) -> Result<BufWriter<fs::File>> {
    let file = fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    if !append {
        writeln!(w, "{header}").and_then(|_| w.flush()).map_err(|e| Error::io(path, e))?;
    }
    Ok(w)
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    iteration: u64,
    config: Config,
    rng: RngState,
    adam_steps: [u64; 4],
}

/// Layout: magic, `u32` version, `u32` metadata length, metadata JSON, the twelve
/// parameter stores (four models, then first and second moments per model) and a
/// trailing SHA-256 of everything before it.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let meta = CheckpointMeta {
        iteration: state.iteration,
        config: state.cfg.clone(),
        rng: state.rng.state(),
        adam_steps: [
            state.opt_gen_t.steps,
            state.opt_gen_c.steps,
            state.opt_disc_t.steps,
            state.opt_disc_c.steps,
        ],
    };
    let json = serde_json::to_vec(&meta).expect("checkpoint metadata serializes");
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for s in state.stores() {
        s.write_to(&mut buf).expect("writing to memory");
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Networks, TrainState)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |m: &str| Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        message: m.to_owned(),
    };
    if bytes.len() < 16 + 32 || &bytes[..8] != CKPT_MAGIC {
        return Err(corrupt("missing header"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(Error::CheckpointVersion {
            path: path.to_path_buf(),
            found: version,
            expected: CKPT_VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch (truncated or modified)"));
    }
    let json_len = u32::from_le_bytes(body[12..16].try_into().unwrap()) as usize;
    let json = body.get(16..16 + json_len).ok_or_else(|| corrupt("metadata past end of file"))?;
    let meta: CheckpointMeta =
        serde_json::from_slice(json).map_err(|e| corrupt(&format!("metadata: {e}")))?;
    let mut r = &body[16 + json_len..];
    let mut stores = Vec::with_capacity(12);
    for _ in 0..12 {
        let s = ParameterStore::<f32>::read_from(&mut r).map_err(|e| match e {
            FormatError::Corrupt(m) => corrupt(&m),
            FormatError::Version(v) => corrupt(&format!("parameter block version {v}")),
        })?;
        stores.push(s);
    }
    if r.read(&mut [0u8])
        .map_err(|e| Error::io(path, e))?
        != 0
    {
        return Err(corrupt("trailing bytes"));
    }
    let (nets, mut state) = TrainState::new(&meta.config)?;
    let mut it = stores.into_iter();
    let mut next = || it.next().expect("twelve stores");
    let assign = |dst: &mut ParameterStore<f32>, src: ParameterStore<f32>| {
        dst.assign_from(&src).map_err(|e| corrupt(&e.to_string()))
    };
    for dst in [&mut state.gen_t, &mut state.gen_c, &mut state.disc_t, &mut state.disc_c] {
        assign(dst, next())?;
    }
    for (opt, steps) in [
        &mut state.opt_gen_t,
        &mut state.opt_gen_c,
        &mut state.opt_disc_t,
        &mut state.opt_disc_c,
    ]
    .into_iter()
    .zip(meta.adam_steps)
    {
        assign(&mut opt.m, next())?;
        assign(&mut opt.v, next())?;
        opt.steps = steps;
    }
    state.iteration = meta.iteration;
    state.rng = Rng::from_state(meta.rng);
    Ok((nets, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discriminator::HEAD_PREFIXES;
    use crate::synthdata::generate_dataset;

    fn toy(iterations: u64) -> (Config, Vec<Sample>) {
        let mut cfg = Config::toy();
        cfg.iterations = iterations;
        cfg.batch_size = 2;
        cfg.checkpoint_every = 2;
        cfg.sample_every = 0;
        (cfg.clone(), generate_dataset(&cfg, 3, 7))
    }

    #[test]
    fn adam_first_step_moves_each_weight_by_lr() {
        let mut store = ParameterStore::<f32>::new();
        store.add("w", &[3], crate::nn::Init::Zeros, &mut Rng::new(0, 0));
        let mut grads = store.zeros_like();
        grads.get_mut("w").data_mut().copy_from_slice(&[0.5, -2.0, 0.0]);
        let mut opt = AdamState::new(&store);
        opt.update(&mut store, &grads, 0.01, 0.0, 0.999);
        let w = store.get("w").data();
        assert!((w[0] + 0.01).abs() < 1e-7 && (w[1] - 0.01).abs() < 1e-7 && w[2] == 0.0, "{w:?}");
        assert_eq!(opt.steps, 1);
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let n = 7;
        let mut seen: Vec<usize> = (1..=7).flat_map(|it| batch_indices(3, n, 2, it)).collect();
        assert_eq!(seen.len(), 14);
        seen.truncate(7);
        seen.sort_unstable();
        assert_eq!(seen, (0..7).collect::<Vec<_>>());
        assert_eq!(batch_indices(3, n, 2, 4), batch_indices(3, n, 2, 4));
        assert_ne!(batch_indices(3, n, 7, 1), batch_indices(4, n, 7, 1));
    }

    #[test]
    fn fresh_runs_are_bit_identical() {
        let (cfg, data) = toy(1);
        let batch: Vec<&Sample> = data.iter().take(2).collect();
        let run = || {
            let (nets, mut st) = TrainState::new(&cfg).unwrap();
            let l = train_step(&nets, &mut st, &batch).unwrap();
            (l, st)
        };
        let (l1, s1) = run();
        let (l2, s2) = run();
        assert_eq!(l1, l2);
        assert_eq!(s1, s2);
        assert!(LossTerm::ALL.iter().all(|&t| l1.generator.get(t).is_some_and(f64::is_finite)));
    }

    #[test]
    fn one_step_changes_every_parameter_group() {
        let (cfg, data) = toy(1);
        let batch: Vec<&Sample> = data.iter().take(2).collect();
        let (nets, mut st) = TrainState::new(&cfg).unwrap();
        let before = st.clone();
        train_step(&nets, &mut st, &batch).unwrap();
        for (old, new) in [
            (&before.gen_t, &st.gen_t),
            (&before.gen_c, &st.gen_c),
            (&before.disc_t, &st.disc_t),
            (&before.disc_c, &st.disc_c),
        ] {
            // a group is a layer: its weight and bias (the image-head bias alone has
            // zero gradient at init, the real and fake hinges cancel)
            let mut moved = std::collections::BTreeMap::<&str, bool>::new();
            for (name, t) in old.iter() {
                let group = name.rsplit_once('.').map_or(name, |(g, _)| g);
                *moved.entry(group).or_default() |= t.data() != new.get(name).data();
            }
            let dead: Vec<_> = moved.iter().filter(|(_, &m)| !m).map(|(g, _)| *g).collect();
            assert!(dead.is_empty(), "groups that did not move: {dead:?}");
        }
    }

    #[test]
    fn zero_heads_give_hinge_two() {
        let (mut cfg, data) = toy(1);
        for t in [LossTerm::ReconImg, LossTerm::Kl, LossTerm::ReconLatent, LossTerm::Perceptual] {
            cfg.set_disabled(t, true);
        }
        let (nets, mut st) = TrainState::new(&cfg).unwrap();
        for store in [&mut st.disc_t, &mut st.disc_c] {
            for (name, t) in store.iter_mut() {
                if HEAD_PREFIXES.iter().any(|p| name.starts_with(p)) {
                    t.data_mut().fill(0.0);
                }
            }
        }
        let batch: Vec<&Sample> = data.iter().take(2).collect();
        let l = train_step(&nets, &mut st, &batch).unwrap();
        let d = l.discriminator.unwrap();
        assert_eq!(d.adv, 2.0);
        assert!((d.class - (cfg.CAT as f64).ln()).abs() < 1e-5);
        assert_eq!(l.generator.recon_img, None);
        assert!(l.generator.adv.is_some());
    }

    #[test]
    fn disabling_adv_skips_the_discriminator() {
        let (mut cfg, data) = toy(1);
        cfg.disable_adv = true;
        let (nets, mut st) = TrainState::new(&cfg).unwrap();
        let before = st.disc_t.clone();
        let l = train_step(&nets, &mut st, &[&data[0]]).unwrap();
        assert_eq!(l.discriminator, None);
        assert_eq!(l.generator.adv, None);
        assert_eq!(st.disc_t, before);
        let row = LogRow { iteration: 1, losses: l }.to_csv();
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 9);
        assert_eq!((fields[1], fields[2], fields[8]), ("NA", "NA", "NA"));
    }

    #[test]
    fn non_finite_parameters_abort_with_term_name() {
        let (cfg, data) = toy(1);
        let (nets, mut st) = TrainState::new(&cfg).unwrap();
        st.gen_c.get_mut("dec.out.bias").data_mut()[0] = f32::NAN;
        match train_step(&nets, &mut st, &[&data[0]]) {
            Err(Error::NonFinite { term, iteration: 1 }) => assert!(!term.is_empty()),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_iterations_checkpoint_equals_initialization() {
        let (cfg, data) = toy(0);
        let dir = tempfile::tempdir().unwrap();
        let (nets, st) = TrainState::new(&cfg).unwrap();
        let out = run(&nets, st.clone(), &data, dir.path()).unwrap();
        assert_eq!(out.checkpoints, vec![checkpoint_path(dir.path(), 0)]);
        let (_, back) = load_checkpoint(&out.checkpoints[0]).unwrap();
        assert_eq!(back, st);
        let csv = fs::read_to_string(dir.path().join("losses.csv")).unwrap();
        assert_eq!(csv, format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let (cfg, data) = toy(1);
        let dir = tempfile::tempdir().unwrap();
        let (nets, mut st) = TrainState::new(&cfg).unwrap();
        train_step(&nets, &mut st, &[&data[1]]).unwrap();
        let path = dir.path().join("a.ckpt");
        save_checkpoint(&st, &path).unwrap();
        let (_, back) = load_checkpoint(&path).unwrap();
        assert_eq!(back, st);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CorruptCheckpoint { .. })));
        let mut flipped = bytes.clone();
        flipped[bytes.len() / 2] ^= 1;
        fs::write(&path, &flipped).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CorruptCheckpoint { .. })));
        let mut versioned = bytes.clone();
        versioned[8..12].copy_from_slice(&7u32.to_le_bytes());
        fs::write(&path, &versioned).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::CheckpointVersion { found: 7, expected: 1, .. })
        ));
        assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (cfg, data) = toy(3);
        let full_dir = tempfile::tempdir().unwrap();
        let (nets, st) = TrainState::new(&cfg).unwrap();
        let full = run(&nets, st, &data, full_dir.path()).unwrap();
        assert_eq!(full.log.len(), 3);
        assert_eq!(
            full.checkpoints,
            vec![checkpoint_path(full_dir.path(), 2), checkpoint_path(full_dir.path(), 3)]
        );

        let (nets, mut st) = load_checkpoint(&full.checkpoints[0]).unwrap();
        assert_eq!(st.iteration, 2);
        let resumed_dir = tempfile::tempdir().unwrap();
        st.cfg.iterations = 3;
        let resumed = run(&nets, st, &data, resumed_dir.path()).unwrap();
        assert_eq!(resumed.log, full.log[2..]);
        assert_eq!(resumed.state, full.state);
    }

    #[test]
    fn fit_writes_csv_samples_and_probes() {
        let (mut cfg, data) = toy(2);
        cfg.sample_every = 1;
        let dir = tempfile::tempdir().unwrap();
        let data_dir = dir.path().join("data");
        crate::synthdata::write_dataset(&data_dir, &data).unwrap();
        let out_dir = dir.path().join("run");
        let out = fit(&cfg, &data_dir, &out_dir).unwrap();
        let csv = fs::read_to_string(out_dir.join("losses.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 3);
        assert!(lines[1..].iter().all(|l| l.split(',').skip(1).all(|v| v.parse::<f64>().unwrap().is_finite())));
        for tag in ["t2c", "c2t", "t2t", "c2c"] {
            assert!(out_dir.join(format!("samples/iter_000002_{tag}.png")).exists());
        }
        assert_eq!(out.sample_images.len(), 8);
        assert_eq!(out.probes.iter().map(|p| p.iteration).collect::<Vec<_>>(), vec![0, 1, 2]);
    }
}
