//! Run configuration and its flat `key = value` text format.
//!
//! The file format is one key per line with `#` comments, which is also valid TOML; it is
//! parsed with the `toml` crate. Keys missing from a file keep their desk-scale defaults.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// The five objective terms of the generator loss, in weight order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LossTerm {
    Adv,
    ReconImg,
    Kl,
    ReconLatent,
    Perceptual,
}

impl LossTerm {
    pub const ALL: [LossTerm; 5] = [
        LossTerm::Adv,
        LossTerm::ReconImg,
        LossTerm::Kl,
        LossTerm::ReconLatent,
        LossTerm::Perceptual,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Adv => "adv",
            LossTerm::ReconImg => "recon_img",
            LossTerm::Kl => "kl",
            LossTerm::ReconLatent => "recon_latent",
            LossTerm::Perceptual => "perceptual",
        }
    }

    pub fn valid_names() -> String {
        Self::ALL.iter().map(|t| t.name()).collect::<Vec<_>>().join(", ")
    }
}

impl FromStr for LossTerm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|t| t.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown loss `{s}`; valid names: {}",
                    Self::valid_names()
                ))
            })
    }
}

impl std::fmt::Display for LossTerm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[allow(non_snake_case)]
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub image_size: usize,
    pub max_objects: usize,
    pub CAT: usize,
    /// Number of leading category ids that are stuff (id 0 is background).
    pub stuff_categories: usize,
    pub d_C: usize,
    pub d_S: usize,
    pub d_L: usize,
    pub d_Src: usize,
    pub roi_size: usize,
    pub layout_scale: usize,
    pub clstm_layers: usize,
    pub clstm_hidden: usize,
    /// Stem width of encoder and discriminator backbones.
    pub base_channels: usize,
    pub lambda_obj: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    pub lr_G: f64,
    pub lr_D: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub iterations: u64,
    pub seed: u64,
    pub batch_size: usize,
    pub checkpoint_every: u64,
    pub sample_every: u64,
    /// Also apply the image L1 to the paired cross-domain output (t2c vs c, c2t vs t).
    pub recon_cross_domain: bool,
    pub disable_adv: bool,
    pub disable_recon_img: bool,
    pub disable_kl: bool,
    pub disable_recon_latent: bool,
    pub disable_perceptual: bool,
}

impl Default for Config {
    fn default() -> Self {
        Self::desk()
    }
}

impl Config {
    /// Desk-scale defaults (64x64 images, single CPU core).
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            max_objects: 8,
            CAT: 8,
            stuff_categories: 4,
            d_C: 64,
            d_S: 32,
            d_L: 32,
            d_Src: 32,
            roi_size: 4,
            layout_scale: 4,
            clstm_layers: 4,
            clstm_hidden: 16,
            base_channels: 16,
            lambda_obj: 1.0,
            lambda1: 0.1,
            lambda2: 1.0,
            // 1.0 at full scale; at desk scale the KL term collapses the style codes and
            // caps colour reconstruction, while much lower weights lose style diversity
            lambda3: 0.5,
            lambda4: 0.5,
            lambda5: 1.0,
            // 1e-4 at full scale; too slow for a 2,000-iteration desk run
            lr_G: 5e-4,
            // 0.005 at full scale; the small desk discriminators overpower the generators
            lr_D: 1e-4,
            adam_beta1: 0.0,
            adam_beta2: 0.999,
            iterations: 2000,
            seed: 0,
            batch_size: 4,
            checkpoint_every: 500,
            sample_every: 500,
            recon_cross_domain: false,
            disable_adv: false,
            disable_recon_img: false,
            disable_kl: false,
            disable_recon_latent: false,
            disable_perceptual: false,
        }
    }

    /// Full-size settings (256x256, COCO-panoptic category count).
    pub fn paper() -> Self {
        Self {
            image_size: 256,
            max_objects: 32,
            CAT: 134,
            stuff_categories: 54,
            d_C: 512,
            d_S: 256,
            d_L: 256,
            d_Src: 256,
            roi_size: 8,
            layout_scale: 4,
            clstm_layers: 4,
            clstm_hidden: 512,
            base_channels: 64,
            lambda3: 1.0,
            lambda4: 1.0,
            lr_G: 1e-4,
            lr_D: 0.005,
            iterations: 400_000,
            checkpoint_every: 10_000,
            sample_every: 10_000,
            ..Self::desk()
        }
    }

    /// Tiny configuration used by gradient checks and fast tests.
    pub fn toy() -> Self {
        Self {
            image_size: 16,
            max_objects: 4,
            CAT: 5,
            stuff_categories: 2,
            d_C: 4,
            d_S: 2,
            d_L: 2,
            d_Src: 2,
            roi_size: 2,
            layout_scale: 2,
            clstm_layers: 2,
            clstm_hidden: 3,
            base_channels: 2,
            batch_size: 1,
            iterations: 2,
            ..Self::desk()
        }
    }

    pub fn feature_size(&self) -> usize {
        self.image_size / 4
    }

    pub fn layout_size(&self) -> usize {
        self.roi_size * self.layout_scale
    }

    /// Number of 2x upsampling stages the decoder needs to go from layout to image size.
    pub fn decoder_upsamples(&self) -> usize {
        (self.image_size / self.layout_size()).trailing_zeros() as usize
    }

    pub fn is_disabled(&self, term: LossTerm) -> bool {
        match term {
            LossTerm::Adv => self.disable_adv,
            LossTerm::ReconImg => self.disable_recon_img,
            LossTerm::Kl => self.disable_kl,
            LossTerm::ReconLatent => self.disable_recon_latent,
            LossTerm::Perceptual => self.disable_perceptual,
        }
    }

    pub fn set_disabled(&mut self, term: LossTerm, disabled: bool) {
        let slot = match term {
            LossTerm::Adv => &mut self.disable_adv,
            LossTerm::ReconImg => &mut self.disable_recon_img,
            LossTerm::Kl => &mut self.disable_kl,
            LossTerm::ReconLatent => &mut self.disable_recon_latent,
            LossTerm::Perceptual => &mut self.disable_perceptual,
        };
        *slot = disabled;
    }

    pub fn weight(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::Adv => self.lambda1,
            LossTerm::ReconImg => self.lambda2,
            LossTerm::Kl => self.lambda3,
            LossTerm::ReconLatent => self.lambda4,
            LossTerm::Perceptual => self.lambda5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        // TOML integers are signed 64-bit
        if self.seed > i64::MAX as u64 || self.iterations > i64::MAX as u64 {
            return fail("seed and iterations must not exceed 2^63 - 1".into());
        }
        if self.image_size < 8 || self.image_size % 4 != 0 {
            return fail(format!("image_size {} must be a multiple of 4 and >= 8", self.image_size));
        }
        if self.max_objects == 0 {
            return fail("max_objects must be >= 1".into());
        }
        if self.CAT < 2 || self.stuff_categories == 0 || self.stuff_categories >= self.CAT {
            return fail(format!(
                "need 1 <= stuff_categories < CAT, got {} and {}",
                self.stuff_categories, self.CAT
            ));
        }
        if self.CAT > 255 {
            return fail("CAT must fit in a byte".into());
        }
        for (name, v) in [
            ("d_C", self.d_C),
            ("d_S", self.d_S),
            ("d_L", self.d_L),
            ("roi_size", self.roi_size),
            ("layout_scale", self.layout_scale),
            ("clstm_layers", self.clstm_layers),
            ("clstm_hidden", self.clstm_hidden),
            ("base_channels", self.base_channels),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.d_Src != self.d_S {
            return fail(format!(
                "d_Src ({}) must equal d_S ({}): sampled and encoded styles share the style projection",
                self.d_Src, self.d_S
            ));
        }
        let layout = self.layout_size();
        if layout > self.image_size || self.image_size % layout != 0 || !(self.image_size / layout).is_power_of_two() {
            return fail(format!(
                "image_size / (roi_size * layout_scale) = {} / {} must be a power of two",
                self.image_size, layout
            ));
        }
        if self.max_objects > 254 {
            return fail("max_objects must be < 255 for 8-bit label maps".into());
        }
        for (name, v) in [
            ("lambda_obj", self.lambda_obj),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
            ("lambda5", self.lambda5),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be finite and non-negative"));
            }
        }
        if !(self.lr_G > 0.0 && self.lr_D > 0.0 && self.lr_G.is_finite() && self.lr_D.is_finite()) {
            return fail("learning rates must be finite and positive".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("adam betas must lie in [0, 1)".into());
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical text form, every key on its own line.
    ///
    /// Panics if an integer field exceeds `i64::MAX`, which [`Config::validate`] rejects.
    pub fn to_text(&self) -> String {
        let value = toml::Value::try_from(self).expect("config serializes");
        let table = value.as_table().expect("config is a table");
        let mut out = String::from("# posa run configuration\n");
        // field order, not alphabetical
        let json = serde_json::to_value(self).expect("config serializes");
        for key in json.as_object().expect("object").keys() {
            let _ = writeln!(out, "{key} = {}", table[key]);
        }
        out
    }

    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_text().as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
