//! Experiment settings: built-in defaults, then the `--config` file, then flags.

use std::path::Path;

use ctxclip::config::KeyValues;
use ctxclip::data::CorpusSpec;
use ctxclip::encoders::ModelDims;
use ctxclip::trainer::TrainConfig;

use crate::{CliError, Flags};

/// Everything a subcommand needs besides file paths.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub corpus: CorpusSpec,
    pub dims: ModelDims,
    /// `seed` drives corpus generation, parameter init and shuffling.
    pub train: TrainConfig<f64>,
    /// Pairs held out from the end of the corpus for evaluation.
    pub held_out: usize,
    pub finetune_epochs: usize,
    pub k: usize,
    pub grad_n: usize,
    pub grad_d: usize,
}

impl Default for Settings {
    fn default() -> Self {
        let corpus = CorpusSpec::default();
        let dims = ModelDims { d_img: corpus.d_img, vocab_size: corpus.vocab_size, ..ModelDims::default() };
        Settings {
            corpus,
            dims,
            train: TrainConfig::default(),
            held_out: 128,
            finetune_epochs: 20,
            k: 5,
            grad_n: 4,
            grad_d: 8,
        }
    }
}

const EXTRA_KEYS: [&str; 17] = [
    "n_classes",
    "n_pairs",
    "d_img",
    "vocab_size",
    "tokens_per_caption",
    "class_token_block",
    "noise_sigma",
    "d_hid",
    "d_i",
    "d_emb",
    "d_t",
    "d_e",
    "held_out",
    "finetune_epochs",
    "k",
    "grad_n",
    "grad_d",
];

impl Settings {
    pub fn keys() -> impl Iterator<Item = &'static str> {
        TrainConfig::<f64>::KEYS.into_iter().chain(EXTRA_KEYS)
    }

    pub fn apply_kv(&mut self, kv: &KeyValues) -> Result<(), CliError> {
        if let Some(unknown) = kv.keys().find(|k| !Self::keys().any(|known| known == *k)) {
            return Err(CliError::Usage(format!("unknown configuration key {unknown:?}")));
        }
        self.train.apply_kv(kv)?;
        let c = &mut self.corpus;
        kv.read_into("n_classes", &mut c.n_classes)?;
        kv.read_into("n_pairs", &mut c.n_pairs)?;
        kv.read_into("d_img", &mut c.d_img)?;
        kv.read_into("vocab_size", &mut c.vocab_size)?;
        kv.read_into("tokens_per_caption", &mut c.tokens_per_caption)?;
        kv.read_into("class_token_block", &mut c.class_token_block)?;
        kv.read_into("noise_sigma", &mut c.noise_sigma)?;
        let d = &mut self.dims;
        kv.read_into("d_hid", &mut d.d_hid)?;
        kv.read_into("d_i", &mut d.d_i)?;
        kv.read_into("d_emb", &mut d.d_emb)?;
        kv.read_into("d_t", &mut d.d_t)?;
        kv.read_into("d_e", &mut d.d_e)?;
        kv.read_into("held_out", &mut self.held_out)?;
        kv.read_into("finetune_epochs", &mut self.finetune_epochs)?;
        kv.read_into("k", &mut self.k)?;
        kv.read_into("grad_n", &mut self.grad_n)?;
        kv.read_into("grad_d", &mut self.grad_d)?;
        self.sync();
        Ok(())
    }

    fn sync(&mut self) {
        self.dims.d_img = self.corpus.d_img;
        self.dims.vocab_size = self.corpus.vocab_size;
        self.corpus.seed = self.train.seed;
    }

    /// Defaults, overridden by the config file, overridden by flags.
    pub fn resolve(flags: &Flags) -> Result<Self, CliError> {
        let mut s = Settings::default();
        if let Some(path) = &flags.config {
            s.apply_kv(&KeyValues::load(Path::new(path))?)?;
        }
        if let Some(seed) = flags.seed {
            s.train.seed = seed;
        }
        if let Some(alpha) = flags.alpha {
            s.train.loss.alpha = alpha;
        }
        if let Some(epochs) = flags.epochs {
            s.train.epochs = epochs;
            s.finetune_epochs = epochs;
        }
        if let Some(k) = flags.k {
            s.k = k;
        }
        s.sync();
        s.train.validate()?;
        s.dims.validate()?;
        s.corpus.validate()?;
        Ok(s)
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = self.train.to_kv();
        let c = &self.corpus;
        kv.set("n_classes", c.n_classes);
        kv.set("n_pairs", c.n_pairs);
        kv.set("d_img", c.d_img);
        kv.set("vocab_size", c.vocab_size);
        kv.set("tokens_per_caption", c.tokens_per_caption);
        kv.set("class_token_block", c.class_token_block);
        kv.set("noise_sigma", c.noise_sigma);
        let d = &self.dims;
        kv.set("d_hid", d.d_hid);
        kv.set("d_i", d.d_i);
        kv.set("d_emb", d.d_emb);
        kv.set("d_t", d.d_t);
        kv.set("d_e", d.d_e);
        kv.set("held_out", self.held_out);
        kv.set("finetune_epochs", self.finetune_epochs);
        kv.set("k", self.k);
        kv.set("grad_n", self.grad_n);
        kv.set("grad_d", self.grad_d);
        kv
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_kv() {
        let s = Settings::default();
        let mut back = Settings::default();
        back.train.seed = 99;
        back.apply_kv(&s.to_kv()).unwrap();
        assert_eq!(back, s);
        assert_eq!(s.to_kv().keys().count(), Settings::keys().count());
    }

    #[test]
    fn unknown_key_is_usage_error() {
        let kv = KeyValues::parse("frobnicate=1\n", Path::new("c")).unwrap();
        assert!(matches!(Settings::default().apply_kv(&kv), Err(CliError::Usage(_))));
    }
}
