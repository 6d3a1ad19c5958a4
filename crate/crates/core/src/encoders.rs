//! Small trainable stand-ins for the image and text towers plus the two
//! linear projection heads into the shared embedding space.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Token id reserved for padding.
pub const PAD_TOKEN: u32 = 0;

/// Guard added to row norms when embeddings are l2-normalized.
pub const NORM_GUARD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub d_img: usize,
    pub d_hid: usize,
    /// Image feature width.
    pub d_i: usize,
    pub d_emb: usize,
    /// Text feature width.
    pub d_t: usize,
    /// Shared embedding width.
    pub d_e: usize,
    pub vocab_size: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims { d_img: 64, d_hid: 128, d_i: 128, d_emb: 32, d_t: 48, d_e: 32, vocab_size: 128 }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let all = [self.d_img, self.d_hid, self.d_i, self.d_emb, self.d_t, self.d_e, self.vocab_size];
        if all.contains(&0) {
            return Err(Error::invalid(format!("model dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Optimizer group a parameter array belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Image,
    Text,
}

/// One value per parameter array of the model, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Layers<X> {
    pub image_w1: X,
    pub image_b1: X,
    pub image_w2: X,
    pub image_b2: X,
    pub text_embed: X,
    pub text_w: X,
    pub text_b: X,
    pub proj_image: X,
    pub proj_text: X,
}

impl<X> Layers<X> {
    pub const NAMES: [&'static str; 9] = [
        "image_w1",
        "image_b1",
        "image_w2",
        "image_b2",
        "text_embed",
        "text_w",
        "text_b",
        "proj_image",
        "proj_text",
    ];

    pub fn group_of(name: &str) -> ParamGroup {
        if name.starts_with("image") || name == "proj_image" {
            ParamGroup::Image
        } else {
            ParamGroup::Text
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &X)> {
        Self::NAMES.into_iter().zip([
            &self.image_w1,
            &self.image_b1,
            &self.image_w2,
            &self.image_b2,
            &self.text_embed,
            &self.text_w,
            &self.text_b,
            &self.proj_image,
            &self.proj_text,
        ])
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&'static str, &mut X)> {
        Self::NAMES.into_iter().zip([
            &mut self.image_w1,
            &mut self.image_b1,
            &mut self.image_w2,
            &mut self.image_b2,
            &mut self.text_embed,
            &mut self.text_w,
            &mut self.text_b,
            &mut self.proj_image,
            &mut self.proj_text,
        ])
    }

    pub fn try_map<Y, E>(&self, mut f: impl FnMut(&'static str, &X) -> Result<Y, E>) -> Result<Layers<Y>, E> {
        Ok(Layers {
            image_w1: f("image_w1", &self.image_w1)?,
            image_b1: f("image_b1", &self.image_b1)?,
            image_w2: f("image_w2", &self.image_w2)?,
            image_b2: f("image_b2", &self.image_b2)?,
            text_embed: f("text_embed", &self.text_embed)?,
            text_w: f("text_w", &self.text_w)?,
            text_b: f("text_b", &self.text_b)?,
            proj_image: f("proj_image", &self.proj_image)?,
            proj_text: f("proj_text", &self.proj_text)?,
        })
    }

    pub fn map<Y>(&self, mut f: impl FnMut(&'static str, &X) -> Y) -> Layers<Y> {
        self.try_map(|n, x| Ok::<_, std::convert::Infallible>(f(n, x))).unwrap_or_else(|e| match e {})
    }
}

/// Image MLP, text embedding table + dense layer, and both projection heads.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub dims: ModelDims,
    pub layers: Layers<Tensor<T>>,
}

/// Parameters recorded as leaves on one tape.
pub type BoundParams<T> = Layers<Tensor<T>>;

impl<T: Scalar> ModelParams<T> {
    /// Expected shape of every parameter array.
    pub fn shapes(dims: &ModelDims) -> Layers<Vec<usize>> {
        Layers {
            image_w1: vec![dims.d_img, dims.d_hid],
            image_b1: vec![1, dims.d_hid],
            image_w2: vec![dims.d_hid, dims.d_i],
            image_b2: vec![1, dims.d_i],
            text_embed: vec![dims.vocab_size, dims.d_emb],
            text_w: vec![dims.d_emb, dims.d_t],
            text_b: vec![1, dims.d_t],
            proj_image: vec![dims.d_i, dims.d_e],
            proj_text: vec![dims.d_t, dims.d_e],
        }
    }

    /// Glorot-uniform weights from a seeded ChaCha8 stream, zero biases.
    /// Arrays are filled in [`Layers::NAMES`] order, row-major.
    pub fn init(seed: u64, dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = Self::shapes(&dims).try_map(|name, shape| {
            let n: usize = shape.iter().product();
            if matches!(name, "image_b1" | "image_b2" | "text_b") {
                return Ok(Tensor::zeros(shape));
            }
            let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
            let values = (0..n).map(|_| T::lit(rng.gen_range(-limit..limit))).collect();
            Tensor::new(shape, values)
        })?;
        Ok(ModelParams { dims, layers })
    }

    pub fn zeros(dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        Ok(ModelParams { dims, layers: Self::shapes(&dims).map(|_, s| Tensor::zeros(s)) })
    }

    /// Checks every array against the dims record.
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        let shapes = Self::shapes(&self.dims);
        for ((name, t), (_, s)) in self.layers.iter().zip(shapes.iter()) {
            if t.shape() != s.as_slice() {
                return Err(Error::shape(format!("{name} has shape {:?}, expected {s:?}", t.shape())));
            }
        }
        Ok(())
    }

    pub fn bind(&self, tape: &Tape<T>) -> BoundParams<T> {
        self.layers.map(|_, t| tape.leaf(t))
    }

    /// Binds as constants, for inference.
    pub fn bind_frozen(&self, tape: &Tape<T>) -> BoundParams<T> {
        self.layers.map(|_, t| tape.constant(t))
    }

    pub fn num_values(&self) -> usize {
        self.layers.iter().map(|(_, t)| t.len()).sum()
    }
}

/// Two dense layers with a rectifier between them.
pub fn encode_image<T: Scalar>(tape: &Tape<T>, p: &BoundParams<T>, batch: &Tensor<T>) -> Result<Tensor<T>> {
    if batch.rank() != 2 || batch.cols() != p.image_w1.rows() {
        return Err(Error::shape(format!(
            "image batch {:?} does not match input width {}",
            batch.shape(),
            p.image_w1.rows()
        )));
    }
    let hidden = tape.relu(&tape.add(&tape.matmul(batch, &p.image_w1)?, &p.image_b1)?)?;
    tape.add(&tape.matmul(&hidden, &p.image_w2)?, &p.image_b2)
}

/// `[N, vocab]` matrix whose row `n` averages the one-hot vectors of the
/// non-pad tokens of caption `n`.
pub fn pooling_matrix<T: Scalar, R: AsRef<[u32]>>(tokens: &[R], vocab_size: usize) -> Result<Tensor<T>> {
    let mut values = vec![T::zero(); tokens.len() * vocab_size];
    for (n, row) in tokens.iter().enumerate() {
        let row = row.as_ref();
        if let Some(bad) = row.iter().find(|t| **t as usize >= vocab_size) {
            return Err(Error::invalid(format!("token {bad} in caption {n} is outside vocabulary of {vocab_size}")));
        }
        let count = row.iter().filter(|t| **t != PAD_TOKEN).count();
        if count == 0 {
            return Err(Error::invalid(format!("caption {n} has no non-pad tokens")));
        }
        let weight = T::one() / T::lit(count as f64);
        let out = &mut values[n * vocab_size..(n + 1) * vocab_size];
        for &t in row.iter().filter(|t| **t != PAD_TOKEN) {
            out[t as usize] = out[t as usize] + weight;
        }
    }
    Tensor::matrix(tokens.len(), vocab_size, values)
}

/// Mean of the non-pad token embeddings per caption, then one dense layer.
pub fn encode_text<T: Scalar, R: AsRef<[u32]>>(tape: &Tape<T>, p: &BoundParams<T>, tokens: &[R]) -> Result<Tensor<T>> {
    let pool = pooling_matrix(tokens, p.text_embed.rows())?;
    let pooled = tape.matmul(&pool, &p.text_embed)?;
    tape.add(&tape.matmul(&pooled, &p.text_w)?, &p.text_b)
}

/// Strictly linear map into the shared space: no bias, no nonlinearity.
pub fn project<T: Scalar>(tape: &Tape<T>, features: &Tensor<T>, head: &Tensor<T>) -> Result<Tensor<T>> {
    tape.matmul(features, head)
}

/// Encode, project and l2-normalize a batch of images.
pub fn embed_images<T: Scalar>(tape: &Tape<T>, p: &BoundParams<T>, batch: &Tensor<T>) -> Result<Tensor<T>> {
    let features = encode_image(tape, p, batch)?;
    tape.l2_normalize_rows(&project(tape, &features, &p.proj_image)?, T::lit(NORM_GUARD))
}

/// Encode, project and l2-normalize a batch of captions.
pub fn embed_texts<T: Scalar, R: AsRef<[u32]>>(tape: &Tape<T>, p: &BoundParams<T>, tokens: &[R]) -> Result<Tensor<T>> {
    let features = encode_text(tape, p, tokens)?;
    tape.l2_normalize_rows(&project(tape, &features, &p.proj_text)?, T::lit(NORM_GUARD))
}
