//! Flat `key = value` configuration files for [`TrainConfig`].
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored.
//! Later assignments override earlier ones, so command-line overrides are
//! applied by calling [`TrainConfig::set`] after loading the file.

use std::path::Path;
use std::str::FromStr;

use crate::dataio::Protocol;
use crate::error::{Error, Result};
use crate::losses::Ablation;
use crate::training::TrainConfig;

/// Every key accepted by [`TrainConfig::set`].
pub const KEYS: &[&str] = &[
    "protocol",
    "learning_rate",
    "batch_size",
    "adam_beta1",
    "adam_beta2",
    "steps",
    "seed",
    "checkpoint_every",
    "ablation",
    "lambda_a",
    "lambda_p",
    "lambda_i",
    "guidance_weight",
    "enable_e",
    "enable_guidance",
    "enable_adversarial",
    "enable_perceptual",
    "enable_identity",
    "squared_pixel_loss",
    "generator.base_width",
    "generator.n_down",
    "generator.n_res_blocks",
    "generator.use_guidance",
    "generator.out_channels",
    "dog_sigma_narrow",
    "dog_sigma_wide",
    "d_steps_per_g_step",
    "shuffle",
    "feature_seed",
    "identity_pretrain_steps",
    "image_side",
];

/// Splits config text into `(line, key, value)` triples.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::config(
                format!("line {}", i + 1),
                format!("expected `key = value`, got `{line}`"),
            ));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::config(format!("line {}", i + 1), "empty key"));
        }
        out.push((i + 1, k.to_owned(), v.to_owned()));
    }
    Ok(out)
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{v}` as {}", std::any::type_name::<T>())))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(key, format!("expected a boolean, got `{v}`"))),
    }
}

impl TrainConfig {
    /// Assigns one field by key. Unknown keys and unparsable values are
    /// errors naming the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "protocol" => self.protocol = Protocol::from_str(v)?,
            "learning_rate" => self.learning_rate = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "adam_beta1" => self.adam_betas.0 = num(key, v)?,
            "adam_beta2" => self.adam_betas.1 = num(key, v)?,
            "steps" => self.steps = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "ablation" => {
                self.ablation = match v.to_ascii_lowercase().as_str() {
                    "" | "none" => None,
                    _ => Some(Ablation::from_str(v)?),
                }
            }
            "lambda_a" => self.weights.lambda_a = num(key, v)?,
            "lambda_p" => self.weights.lambda_p = num(key, v)?,
            "lambda_i" => self.weights.lambda_i = num(key, v)?,
            "guidance_weight" => self.weights.guidance_weight = num(key, v)?,
            "enable_e" => self.weights.enable_e = flag(key, v)?,
            "enable_guidance" => self.weights.enable_guidance = flag(key, v)?,
            "enable_adversarial" => self.weights.enable_adversarial = flag(key, v)?,
            "enable_perceptual" => self.weights.enable_perceptual = flag(key, v)?,
            "enable_identity" => self.weights.enable_identity = flag(key, v)?,
            "squared_pixel_loss" => self.weights.squared_pixel_loss = flag(key, v)?,
            "generator.base_width" => self.generator.base_width = num(key, v)?,
            "generator.n_down" => self.generator.n_down = num(key, v)?,
            "generator.n_res_blocks" => self.generator.n_res_blocks = num(key, v)?,
            "generator.use_guidance" => self.generator.use_guidance = flag(key, v)?,
            "generator.out_channels" => self.generator.out_channels = num(key, v)?,
            "dog_sigma_narrow" => self.dog.sigma_narrow = num(key, v)?,
            "dog_sigma_wide" => self.dog.sigma_wide = num(key, v)?,
            "d_steps_per_g_step" => self.d_steps_per_g_step = num(key, v)?,
            "shuffle" => self.shuffle = flag(key, v)?,
            "feature_seed" => self.feature_seed = num(key, v)?,
            "identity_pretrain_steps" => self.identity_pretrain_steps = num(key, v)?,
            "image_side" => self.image_side = num(key, v)?,
            _ => return Err(Error::config(key, "unknown configuration key")),
        }
        Ok(())
    }

    /// Applies every assignment in `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (_, k, v) in parse_pairs(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    /// Defaults overridden by the assignments in `text`.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Renders every field as config text that [`TrainConfig::from_text`]
    /// parses back to an equal value.
    pub fn to_text(&self) -> String {
        let b = |x: bool| if x { "true" } else { "false" };
        let w = &self.weights;
        let rows: Vec<(&str, String)> = vec![
            ("protocol", self.protocol.to_string()),
            ("learning_rate", format!("{:?}", self.learning_rate)),
            ("batch_size", self.batch_size.to_string()),
            ("adam_beta1", format!("{:?}", self.adam_betas.0)),
            ("adam_beta2", format!("{:?}", self.adam_betas.1)),
            ("steps", self.steps.to_string()),
            ("seed", self.seed.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("ablation", self.ablation.map_or("none".into(), |a| a.to_string())),
            ("lambda_a", format!("{:?}", w.lambda_a)),
            ("lambda_p", format!("{:?}", w.lambda_p)),
            ("lambda_i", format!("{:?}", w.lambda_i)),
            ("guidance_weight", format!("{:?}", w.guidance_weight)),
            ("enable_e", b(w.enable_e).into()),
            ("enable_guidance", b(w.enable_guidance).into()),
            ("enable_adversarial", b(w.enable_adversarial).into()),
            ("enable_perceptual", b(w.enable_perceptual).into()),
            ("enable_identity", b(w.enable_identity).into()),
            ("squared_pixel_loss", b(w.squared_pixel_loss).into()),
            ("generator.base_width", self.generator.base_width.to_string()),
            ("generator.n_down", self.generator.n_down.to_string()),
            ("generator.n_res_blocks", self.generator.n_res_blocks.to_string()),
            ("generator.use_guidance", b(self.generator.use_guidance).into()),
            ("generator.out_channels", self.generator.out_channels.to_string()),
            ("dog_sigma_narrow", format!("{:?}", self.dog.sigma_narrow)),
            ("dog_sigma_wide", format!("{:?}", self.dog.sigma_wide)),
            ("d_steps_per_g_step", self.d_steps_per_g_step.to_string()),
            ("shuffle", b(self.shuffle).into()),
            ("feature_seed", self.feature_seed.to_string()),
            ("identity_pretrain_steps", self.identity_pretrain_steps.to_string()),
            ("image_side", self.image_side.to_string()),
        ];
        rows.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_blank_lines_and_overrides() {
        let text = "# run\n\nsteps = 10   # short\nseed=3\nsteps = 20\nprotocol = S0_VIS_DOG\n";
        let c = TrainConfig::from_text(text).unwrap();
        assert_eq!(c.steps, 20);
        assert_eq!(c.seed, 3);
        assert_eq!(c.protocol, Protocol::S0VisDog);
    }

    #[test]
    fn errors_name_the_key() {
        let err = TrainConfig::from_text("learning_rat = 1").unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "learning_rat"));
        let err = TrainConfig::from_text("batch_size = three").unwrap_err();
        assert!(err.to_string().contains("batch_size"));
        assert!(TrainConfig::from_text("just words").is_err());
    }

    #[test]
    fn text_round_trip_covers_every_key() {
        let mut c = TrainConfig::default();
        for (k, v) in [
            ("ablation", "E+G+GAN"),
            ("learning_rate", "0.00123"),
            ("generator.base_width", "8"),
            ("shuffle", "off"),
            ("dog_sigma_wide", "3.5"),
        ] {
            c.set(k, v).unwrap();
        }
        let text = c.to_text();
        assert_eq!(TrainConfig::from_text(&text).unwrap(), c);
        let keys: Vec<String> = parse_pairs(&text).unwrap().into_iter().map(|(_, k, _)| k).collect();
        assert_eq!(keys, KEYS.to_vec());
    }

    #[test]
    fn ablation_none_clears() {
        let mut c = TrainConfig::from_text("ablation = e").unwrap();
        assert_eq!(c.ablation, Some(Ablation::E));
        c.set("ablation", "none").unwrap();
        assert_eq!(c.ablation, None);
    }
}
