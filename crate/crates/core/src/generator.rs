//! Per-domain generator: content encoder, object style encoder, panoptic style
//! alignment, layout composition through the cLSTM, and the image decoder.
//!
//! A translation `t -> c` uses the content encoder of the source domain and the
//! decoder of the target domain; styles come from the target domain's style encoder
//! (within-domain) or from the standard normal prior (cross-domain).

use crate::autograd::{Graph, Var};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::nn::roi::{downsample_mask, feature_mask, roi_align, to_layout};
use crate::nn::{lrelu, Bound, Conv2d, ConvLstm, Embedding, Linear, ParameterStore, ResBlock};
use crate::rng::Rng;
use crate::tensor::{Float, Tensor};
use crate::types::{ImageTensor, PanopticMap};

pub const ADAIN_EPS: f64 = 1e-5;
pub const LOGVAR_LIMIT: f64 = 20.0;
const ENCODER_BLOCKS: usize = 3;
const DECODER_BLOCKS: usize = 3;

/// Gaussian style code of one object. `sample = mu + exp(logvar / 2) * noise`.
#[derive(Clone, Copy)]
pub struct StyleCode<'g, T> {
    pub mu: Var<'g, T>,
    pub logvar: Var<'g, T>,
    pub sample: Var<'g, T>,
}

/// `m` standard-normal style samples recorded with `mu = 0`, `logvar = 0`.
pub fn sample_style_prior<'g, T: Float>(graph: &'g Graph<T>, m: usize, cfg: &Config, rng: &mut Rng) -> Vec<StyleCode<'g, T>> {
    (0..m)
        .map(|_| {
            let draw = rng.normals(cfg.d_Src);
            StyleCode {
                mu: graph.constant(Tensor::zeros(&[cfg.d_Src])),
                logvar: graph.constant(Tensor::zeros(&[cfg.d_Src])),
                sample: graph.constant(Tensor::from_f64(&[cfg.d_Src], &draw)),
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Generator {
    cfg: Config,
    stem: Conv2d,
    down: [Conv2d; 2],
    enc_blocks: Vec<ResBlock>,
    style_convs: [Conv2d; 2],
    style_mu: Linear,
    style_logvar: Linear,
    embed: Embedding,
    style_proj: Linear,
    lstm: ConvLstm,
    dec_in: Conv2d,
    dec_blocks: Vec<ResBlock>,
    dec_ups: Vec<Conv2d>,
    dec_out: Conv2d,
}

impl Generator {
    /// Build the architecture for `cfg`, registering orthogonally initialized
    /// parameters in `store`.
    pub fn new<T: Float>(cfg: &Config, store: &mut ParameterStore<T>, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let b = cfg.base_channels;
        let d = cfg.d_C;
        let stem = Conv2d::new(store, rng, "enc.stem", 3, b, 3, 1);
        let down = [
            Conv2d::new(store, rng, "enc.down0", b, 2 * b, 3, 2),
            Conv2d::new(store, rng, "enc.down1", 2 * b, d, 3, 2),
        ];
        let enc_blocks = (0..ENCODER_BLOCKS)
            .map(|i| ResBlock::new(store, rng, &format!("enc.block{i}"), d))
            .collect();
        let style_convs = [
            Conv2d::new(store, rng, "style.conv0", d, d, 3, 2),
            Conv2d::new(store, rng, "style.conv1", d, d, 3, 2),
        ];
        let style_mu = Linear::new(store, rng, "style.mu", d, cfg.d_S);
        let style_logvar = Linear::new(store, rng, "style.logvar", d, cfg.d_S);
        let embed = Embedding::new(store, rng, "align.embed", cfg.CAT, cfg.d_L);
        let style_proj = Linear::new(store, rng, "align.proj", cfg.d_Src + cfg.d_L, 2 * d);
        let lstm = ConvLstm::new(store, rng, "compose.lstm", d, cfg.clstm_hidden, cfg.clstm_layers);
        let wide = 2 * b;
        let dec_in = Conv2d::new(store, rng, "dec.in", cfg.clstm_hidden, wide, 3, 1);
        let dec_blocks = (0..DECODER_BLOCKS)
            .map(|i| ResBlock::new(store, rng, &format!("dec.block{i}"), wide))
            .collect();
        let ups = cfg.decoder_upsamples();
        let mut ch = wide;
        let dec_ups = (0..ups)
            .map(|i| {
                let out = if i + 1 == ups { b } else { wide };
                let conv = Conv2d::new(store, rng, &format!("dec.up{i}"), ch, out, 3, 1);
                ch = out;
                conv
            })
            .collect();
        let dec_out = Conv2d::new(store, rng, "dec.out", ch, 3, 3, 1);
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            down,
            enc_blocks,
            style_convs,
            style_mu,
            style_logvar,
            embed,
            style_proj,
            lstm,
            dec_in,
            dec_blocks,
            dec_ups,
            dec_out,
        })
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    /// Backbone feature map `[d_C, H/4, W/4]` of a `[3, H, W]` image.
    pub fn backbone<'g, T: Float>(&self, p: &Bound<'g, '_, T>, img: Var<'g, T>) -> Var<'g, T> {
        let mut x = lrelu(self.stem.forward(p, img));
        for conv in &self.down {
            x = lrelu(conv.forward(p, x));
        }
        for block in &self.enc_blocks {
            x = block.forward(p, x);
        }
        x
    }

    /// One `[d_C, roi, roi]` content code per object, in map order.
    pub fn encode_content<'g, T: Float>(
        &self,
        p: &Bound<'g, '_, T>,
        img: Var<'g, T>,
        map: &PanopticMap,
    ) -> Result<Vec<Var<'g, T>>> {
        check_image(&img, &self.cfg)?;
        let fm = self.backbone(p, img);
        map.objects
            .iter()
            .map(|o| roi_align(fm, &o.bbox, self.cfg.image_size, self.cfg.roi_size))
            .collect()
    }

    /// Gaussian style code per content code; `rng` supplies the reparameterization noise.
    pub fn encode_style<'g, T: Float>(
        &self,
        p: &Bound<'g, '_, T>,
        codes: &[Var<'g, T>],
        rng: &mut Rng,
    ) -> Result<Vec<StyleCode<'g, T>>> {
        if codes.is_empty() {
            return Err(Error::InvalidArgument("style encoding of no objects".into()));
        }
        let graph = p.graph();
        Ok(codes
            .iter()
            .map(|&c| {
                let (mu, logvar) = self.style_stats(p, c);
                let noise = graph.constant(Tensor::from_f64(&[self.cfg.d_S], &rng.normals(self.cfg.d_S)));
                let sample = mu + logvar.scale(0.5).exp() * noise;
                StyleCode { mu, logvar, sample }
            })
            .collect())
    }

    /// `(mu, logvar)` of one content code, without sampling.
    pub fn style_stats<'g, T: Float>(&self, p: &Bound<'g, '_, T>, code: Var<'g, T>) -> (Var<'g, T>, Var<'g, T>) {
        let mut x = code;
        for conv in &self.style_convs {
            x = lrelu(conv.forward(p, x));
        }
        let pooled = x.mean_spatial();
        let mu = self.style_mu.forward(p, pooled);
        let logvar = self.style_logvar.forward(p, pooled).clamp(-LOGVAR_LIMIT, LOGVAR_LIMIT);
        (mu, logvar)
    }

    /// AdaIN of the content code with scale and bias projected from
    /// `concat(style, embed(category))`. The projection output is read as
    /// `(scale - 1, bias)` so a zero projection is plain instance normalization.
    pub fn style_align<'g, T: Float>(
        &self,
        p: &Bound<'g, '_, T>,
        content: Var<'g, T>,
        category_id: usize,
        style: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        if style.numel() != self.cfg.d_Src {
            return Err(Error::Shape(format!(
                "style sample has {} dims, expected {}",
                style.numel(),
                self.cfg.d_Src
            )));
        }
        let label = self.embed.forward(p, category_id)?;
        let v = Var::concat(&[style, label]);
        let affine = self.style_proj.forward(p, v);
        let d = self.cfg.d_C;
        let scale = affine.narrow(0, d).add_scalar(1.0);
        let bias = affine.narrow(d, d);
        Ok(content.adain(scale, bias, ADAIN_EPS))
    }

    /// Masked layout `F_i` of every object (before composition).
    pub fn masked_layouts<'g, T: Float>(
        &self,
        p: &Bound<'g, '_, T>,
        codes: &[Var<'g, T>],
        map: &PanopticMap,
        styles: &[Var<'g, T>],
    ) -> Result<Vec<Var<'g, T>>> {
        let m = map.len();
        if codes.len() != m || styles.len() != m {
            return Err(Error::Shape(format!(
                "{} content codes and {} styles for {m} objects",
                codes.len(),
                styles.len()
            )));
        }
        let cfg = &self.cfg;
        let layout = cfg.layout_size();
        map.objects
            .iter()
            .zip(codes.iter().zip(styles))
            .map(|(o, (&c, &s))| {
                let aligned = self.style_align(p, c, o.category_id, s)?;
                let placed = to_layout(aligned, &o.bbox, cfg.image_size, cfg.layout_scale, layout)?;
                Ok(feature_mask(placed, &downsample_mask(&o.mask, cfg.image_size, layout)))
            })
            .collect()
    }

    /// Compose the masked layouts in map order and decode to a `[3, H, W]` image in
    /// `[-1, 1]`.
    pub fn decode<'g, T: Float>(
        &self,
        p: &Bound<'g, '_, T>,
        codes: &[Var<'g, T>],
        map: &PanopticMap,
        styles: &[Var<'g, T>],
    ) -> Result<Var<'g, T>> {
        let layouts = self.masked_layouts(p, codes, map, styles)?;
        let h = self.lstm.forward(p, &layouts)?;
        let mut x = lrelu(self.dec_in.forward(p, h));
        for block in &self.dec_blocks {
            x = block.forward(p, x);
        }
        for conv in &self.dec_ups {
            x = lrelu(conv.forward(p, x.upsample2x()));
        }
        Ok(self.dec_out.forward(p, x).tanh())
    }

    /// Full pass with this generator as both encoder and decoder.
    pub fn generate<'g, T: Float>(
        &self,
        p: &Bound<'g, '_, T>,
        img: Var<'g, T>,
        map: &PanopticMap,
        styles: &[Var<'g, T>],
    ) -> Result<Var<'g, T>> {
        let codes = self.encode_content(p, img, map)?;
        self.decode(p, &codes, map, styles)
    }
}

fn check_image<T: Float>(img: &Var<'_, T>, cfg: &Config) -> Result<()> {
    let s = img.shape();
    if s != [3, cfg.image_size, cfg.image_size] {
        return Err(Error::Shape(format!(
            "image tensor {s:?}, expected [3, {0}, {0}]",
            cfg.image_size
        )));
    }
    Ok(())
}

/// Translate `img` from the domain of `source` into the domain of `target` under
/// prior-sampled styles, outside any training graph.
pub fn translate(
    source: (&Generator, &ParameterStore<f32>),
    target: (&Generator, &ParameterStore<f32>),
    img: &ImageTensor,
    map: &PanopticMap,
    rng: &mut Rng,
) -> Result<ImageTensor> {
    let g = Graph::<f32>::new();
    let ps = Bound::frozen(&g, source.1);
    let pt = Bound::frozen(&g, target.1);
    let codes = source.0.encode_content(&ps, g.constant(img.to_chw()), map)?;
    let styles: Vec<_> = sample_style_prior(&g, map.len(), target.0.config(), rng)
        .iter()
        .map(|s| s.sample)
        .collect();
    let out = target.0.decode(&pt, &codes, map, &styles)?;
    ImageTensor::from_chw(&out.value())
}

/// Within-domain reconstruction using the mean of each encoded style.
pub fn reconstruct(
    generator: (&Generator, &ParameterStore<f32>),
    img: &ImageTensor,
    map: &PanopticMap,
) -> Result<ImageTensor> {
    let g = Graph::<f32>::new();
    let p = Bound::frozen(&g, generator.1);
    let codes = generator.0.encode_content(&p, g.constant(img.to_chw()), map)?;
    let styles: Vec<_> = codes.iter().map(|&c| generator.0.style_stats(&p, c).0).collect();
    let out = generator.0.decode(&p, &codes, map, &styles)?;
    ImageTensor::from_chw(&out.value())
}
