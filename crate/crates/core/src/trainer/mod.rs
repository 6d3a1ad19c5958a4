//! Deterministic minibatch training of the dual encoder.

mod adam;
mod checkpoint;
mod finetune;

pub use adam::{adam_step, AdamState, ModelOptimizer, ADAM_EPS, BETA1, BETA2};
pub use checkpoint::{Checkpoint, ClassifierHead, FORMAT_VERSION};
pub use finetune::{fine_tune, split_indices, FineTuneReport};

use crate::autodiff::{Tape, Tensor};
use crate::config::KeyValues;
use crate::data::{batch_iter, PairCorpus};
use crate::encoders::{embed_images, embed_texts, Layers, ModelParams, ParamGroup};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown, LossConfig};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig<T> {
    pub epochs: usize,
    pub batch_size: usize,
    /// Image encoder and image projection head.
    pub lr_image: T,
    /// Text embedding, text dense layer and text projection head.
    pub lr_text: T,
    /// Classification head used by [`fine_tune`].
    pub lr_head: T,
    pub weight_decay: T,
    pub decoupled_weight_decay: bool,
    pub loss: LossConfig<T>,
    pub seed: u64,
}

impl<T: Scalar> Default for TrainConfig<T> {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            lr_image: T::lit(1e-4),
            lr_text: T::lit(1e-6),
            lr_head: T::lit(1e-2),
            weight_decay: T::lit(1e-3),
            decoupled_weight_decay: false,
            loss: LossConfig::default(),
            seed: 7,
        }
    }
}

impl<T: Scalar> TrainConfig<T> {
    pub const KEYS: [&'static str; 14] = [
        "epochs",
        "batch_size",
        "lr_image",
        "lr_text",
        "lr_head",
        "weight_decay",
        "decoupled_weight_decay",
        "tau",
        "lambda",
        "alpha",
        "h",
        "eps",
        "symmetric_contextual",
        "seed",
    ];

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        let rates = [self.lr_image, self.lr_text, self.lr_head, self.weight_decay];
        if rates.iter().any(|r| !(*r >= T::zero()) || !r.is_finite()) {
            return Err(Error::invalid("learning rates and weight decay must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn lr_for(&self, group: ParamGroup) -> T {
        match group {
            ParamGroup::Image => self.lr_image,
            ParamGroup::Text => self.lr_text,
        }
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("lr_image", self.lr_image);
        kv.set("lr_text", self.lr_text);
        kv.set("lr_head", self.lr_head);
        kv.set("weight_decay", self.weight_decay);
        kv.set("decoupled_weight_decay", self.decoupled_weight_decay);
        kv.set("tau", self.loss.tau);
        kv.set("lambda", self.loss.lambda_w);
        kv.set("alpha", self.loss.alpha);
        kv.set("h", self.loss.h);
        kv.set("eps", self.loss.eps);
        kv.set("symmetric_contextual", self.loss.symmetric_contextual);
        kv.set("seed", self.seed);
        kv
    }

    /// Overrides fields present in `kv`; other keys are ignored.
    pub fn apply_kv(&mut self, kv: &KeyValues) -> Result<()> {
        kv.read_into("epochs", &mut self.epochs)?;
        kv.read_into("batch_size", &mut self.batch_size)?;
        kv.read_into("lr_image", &mut self.lr_image)?;
        kv.read_into("lr_text", &mut self.lr_text)?;
        kv.read_into("lr_head", &mut self.lr_head)?;
        kv.read_into("weight_decay", &mut self.weight_decay)?;
        kv.read_into("decoupled_weight_decay", &mut self.decoupled_weight_decay)?;
        kv.read_into("tau", &mut self.loss.tau)?;
        kv.read_into("lambda", &mut self.loss.lambda_w)?;
        kv.read_into("alpha", &mut self.loss.alpha)?;
        kv.read_into("h", &mut self.loss.h)?;
        kv.read_into("eps", &mut self.loss.eps)?;
        kv.read_into("symmetric_contextual", &mut self.loss.symmetric_contextual)?;
        kv.read_into("seed", &mut self.seed)?;
        Ok(())
    }
}

/// Mean losses over one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss<T> {
    pub epoch: usize,
    pub total: T,
    pub contrastive: T,
    pub contextual: T,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchLoss<T> {
    pub epoch: usize,
    pub batch: usize,
    pub loss: LossBreakdown<T>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport<T> {
    pub epochs: Vec<EpochLoss<T>>,
    pub batches: Vec<BatchLoss<T>>,
}

/// Shuffle seed for one epoch.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Objective evaluated on the normalized image and text embeddings of a batch.
pub trait Objective<T: Scalar> {
    fn evaluate(
        &self,
        tape: &Tape<T>,
        image: &Tensor<T>,
        text: &Tensor<T>,
        cfg: &LossConfig<T>,
    ) -> Result<(Tensor<T>, LossBreakdown<T>)>;
}

impl<T: Scalar, F> Objective<T> for F
where
    F: Fn(&Tape<T>, &Tensor<T>, &Tensor<T>, &LossConfig<T>) -> Result<(Tensor<T>, LossBreakdown<T>)>,
{
    fn evaluate(
        &self,
        tape: &Tape<T>,
        image: &Tensor<T>,
        text: &Tensor<T>,
        cfg: &LossConfig<T>,
    ) -> Result<(Tensor<T>, LossBreakdown<T>)> {
        self(tape, image, text, cfg)
    }
}

/// Contrastive loss on the embeddings plus the weighted contextual loss on
/// the same normalized point sets.
pub struct ContextClipObjective;

impl<T: Scalar> Objective<T> for ContextClipObjective {
    fn evaluate(
        &self,
        tape: &Tape<T>,
        image: &Tensor<T>,
        text: &Tensor<T>,
        cfg: &LossConfig<T>,
    ) -> Result<(Tensor<T>, LossBreakdown<T>)> {
        total_loss(tape, image, text, image, text, cfg)
    }
}

pub fn train<T: Scalar>(
    cfg: &TrainConfig<T>,
    corpus: &PairCorpus,
    params: &ModelParams<T>,
) -> Result<(Checkpoint<T>, LossReport<T>)> {
    train_with_objective(cfg, corpus, params, &ContextClipObjective)
}

/// Full training run with a caller-supplied objective.
///
/// Per batch: encode both modalities, project, l2-normalize, evaluate the
/// objective, backpropagate and take one Adam step per parameter array
/// (image arrays at `lr_image`, text arrays at `lr_text`).
pub fn train_with_objective<T: Scalar>(
    cfg: &TrainConfig<T>,
    corpus: &PairCorpus,
    params: &ModelParams<T>,
    objective: &dyn Objective<T>,
) -> Result<(Checkpoint<T>, LossReport<T>)> {
    cfg.validate()?;
    params.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if corpus.image_width() != Some(params.dims.d_img) {
        return Err(Error::shape(format!(
            "corpus images have width {:?}, model expects {}",
            corpus.image_width(),
            params.dims.d_img
        )));
    }

    let mut current = params.clone();
    let mut optimizer = ModelOptimizer::new(&current.layers);
    let mut report = LossReport::default();

    for epoch in 1..=cfg.epochs {
        let batches = batch_iter(corpus, cfg.batch_size, epoch_seed(cfg.seed, epoch), true)?;
        let mut sums = [T::zero(); 3];
        for (b, batch) in batches.iter().enumerate() {
            let wrap = |e: Error| Error::Training { epoch, batch: b, source: Box::new(e) };
            let tape = Tape::new();
            let bound = current.bind(&tape);
            let step = (|| {
                let image = embed_images(&tape, &bound, &batch.images()?)?;
                let text = embed_texts(&tape, &bound, &batch.tokens())?;
                let (loss, parts) = objective.evaluate(&tape, &image, &text, &cfg.loss)?;
                let grads = tape.backward(&loss)?;
                let grads = bound.try_map(|_, leaf| grads.wrt(leaf).map(<[T]>::to_vec))?;
                Ok::<_, Error>((parts, grads))
            })();
            let (parts, grads) = step.map_err(wrap)?;
            optimizer
                .step(
                    &mut current.layers,
                    &grads,
                    |name| Some(cfg.lr_for(Layers::<()>::group_of(name))),
                    cfg.weight_decay,
                    cfg.decoupled_weight_decay,
                )
                .map_err(wrap)?;
            sums[0] = sums[0] + parts.total;
            sums[1] = sums[1] + parts.contrastive;
            sums[2] = sums[2] + parts.contextual;
            report.batches.push(BatchLoss { epoch, batch: b, loss: parts });
        }
        let n = T::lit(batches.len() as f64);
        report.epochs.push(EpochLoss { epoch, total: sums[0] / n, contrastive: sums[1] / n, contextual: sums[2] / n });
    }

    let checkpoint = Checkpoint {
        params: current,
        config: *cfg,
        epoch: cfg.epochs,
        history: report.epochs.clone(),
        head: None,
    };
    Ok((checkpoint, report))
}
