//! Single-file text checkpoints.
//!
//! ```text
//! format_version=1
//! [dims]
//! d_img=64            (then d_hid, d_i, d_emb, d_t, d_e, vocab_size)
//! [config]
//! epochs=30           (TrainConfig keys, in TrainConfig::to_kv order)
//! [state]
//! epoch=30
//! [param image_w1 64x128]
//! <one matrix row per line, space-separated reals>
//! ...                 (all arrays, in Layers::NAMES order)
//! [head_weight 32x8]  (optional classifier head, weight then bias)
//! [head_bias 1x8]
//! [history]
//! epoch,L,L_CLIP,L_CX
//! 1,<total>,<contrastive>,<contextual>
//! ```
//!
//! Reals are written with the shortest representation that parses back to
//! the same value, so a save/load cycle is bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{EpochLoss, TrainConfig};
use crate::autodiff::Tensor;
use crate::config::KeyValues;
use crate::encoders::{Layers, ModelDims, ModelParams};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const FORMAT_VERSION: u32 = 1;

/// Linear classifier on image embeddings, added by fine-tuning.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead<T> {
    /// `[d_e, n_classes]`
    pub weight: Tensor<T>,
    /// `[1, n_classes]`
    pub bias: Tensor<T>,
}

impl<T: Scalar> ClassifierHead<T> {
    pub fn n_classes(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub params: ModelParams<T>,
    pub config: TrainConfig<T>,
    /// Number of completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochLoss<T>>,
    pub head: Option<ClassifierHead<T>>,
}

fn dims_kv(d: &ModelDims) -> KeyValues {
    let mut kv = KeyValues::new();
    kv.set("d_img", d.d_img);
    kv.set("d_hid", d.d_hid);
    kv.set("d_i", d.d_i);
    kv.set("d_emb", d.d_emb);
    kv.set("d_t", d.d_t);
    kv.set("d_e", d.d_e);
    kv.set("vocab_size", d.vocab_size);
    kv
}

fn write_matrix<T: Scalar>(out: &mut String, header: &str, t: &Tensor<T>) {
    let _ = writeln!(out, "[{header} {}x{}]", t.rows(), t.cols());
    for i in 0..t.rows() {
        let row: Vec<String> = t.row(i).iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_text(&self) -> String {
        let mut out = format!("format_version={FORMAT_VERSION}\n[dims]\n");
        out.push_str(&dims_kv(&self.params.dims).to_text());
        out.push_str("[config]\n");
        out.push_str(&self.config.to_kv().to_text());
        let _ = writeln!(out, "[state]\nepoch={}", self.epoch);
        for (name, t) in self.params.layers.iter() {
            write_matrix(&mut out, &format!("param {name}"), t);
        }
        if let Some(head) = &self.head {
            write_matrix(&mut out, "head_weight", &head.weight);
            write_matrix(&mut out, "head_bias", &head.bias);
        }
        out.push_str("[history]\nepoch,L,L_CLIP,L_CX\n");
        for h in &self.history {
            let _ = writeln!(out, "{},{},{},{}", h.epoch, h.total, h.contrastive, h.contextual);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut p = Parser { lines: text.lines().collect(), pos: 0, origin };

        let (i, first) = p.next("format_version")?;
        let found = first
            .strip_prefix("format_version=")
            .ok_or_else(|| p.err(i, format!("expected format_version=..., found {first:?}")))?
            .trim();
        if found != FORMAT_VERSION.to_string() {
            return Err(Error::Version { found: found.to_string(), expected: FORMAT_VERSION });
        }

        // Bad or missing values are reported against the section header.
        let in_section = |p: &Parser, line: usize, e: Error| match e {
            Error::InvalidArgument(msg) | Error::Shape(msg) => p.err(line, msg),
            other => other,
        };
        p.expect("[dims]")?;
        let dims_line = p.pos - 1;
        let kv = p.kv_block()?;
        let dim = |key: &str| -> Result<usize> {
            kv.get(key)?.ok_or_else(|| p.err(dims_line, format!("missing dims key {key:?}")))
        };
        let dims = ModelDims {
            d_img: dim("d_img")?,
            d_hid: dim("d_hid")?,
            d_i: dim("d_i")?,
            d_emb: dim("d_emb")?,
            d_t: dim("d_t")?,
            d_e: dim("d_e")?,
            vocab_size: dim("vocab_size")?,
        };
        dims.validate().map_err(|e| in_section(&p, dims_line, e))?;

        p.expect("[config]")?;
        let config_line = p.pos - 1;
        let kv = p.kv_block()?;
        if let Some(key) = TrainConfig::<T>::KEYS.iter().find(|k| kv.get_raw(k).is_none()) {
            return Err(p.err(config_line, format!("missing config key {key:?}")));
        }
        let mut config = TrainConfig::default();
        config.apply_kv(&kv).map_err(|e| in_section(&p, config_line, e))?;

        p.expect("[state]")?;
        let state_line = p.pos - 1;
        let epoch = p
            .kv_block()?
            .get("epoch")
            .map_err(|e| in_section(&p, state_line, e))?
            .ok_or_else(|| p.err(state_line, "missing state key \"epoch\""))?;

        let shapes = ModelParams::<T>::shapes(&dims);
        let layers: Layers<Tensor<T>> =
            shapes.try_map(|name, shape| p.matrix(&format!("param {name}"), shape))?;
        let params = ModelParams { dims, layers };

        let head = if p.peek().is_some_and(|l| l.starts_with("[head_weight ")) {
            let n_classes = p
                .peek()
                .and_then(|l| l.trim().trim_end_matches(']').rsplit_once('x'))
                .and_then(|(_, c)| c.parse::<usize>().ok())
                .filter(|&c| c > 0)
                .ok_or_else(|| p.err(p.pos, "malformed head_weight header"))?;
            let weight = p.matrix("head_weight", &[dims.d_e, n_classes])?;
            let bias = p.matrix("head_bias", &[1, n_classes])?;
            Some(ClassifierHead { weight, bias })
        } else {
            None
        };

        p.expect("[history]")?;
        p.expect("epoch,L,L_CLIP,L_CX")?;
        let mut history = Vec::new();
        while let Some((i, line)) = p.next_opt() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || p.err(i, format!("malformed history row {line:?}"));
            if fields.len() != 4 {
                return Err(bad());
            }
            let real = |s: &str| s.parse::<T>().map_err(|_| bad());
            history.push(EpochLoss {
                epoch: fields[0].parse().map_err(|_| bad())?,
                total: real(fields[1])?,
                contrastive: real(fields[2])?,
                contextual: real(fields[3])?,
            });
        }

        Ok(Checkpoint { params, config, epoch, history, head })
    }
}

struct Parser<'a> {
    lines: Vec<&'a str>,
    pos: usize,
    origin: &'a Path,
}

impl<'a> Parser<'a> {
    /// `line` is zero-based.
    fn err(&self, line: usize, msg: impl Into<String>) -> Error {
        Error::Parse { path: self.origin.to_path_buf(), line: line + 1, msg: msg.into() }
    }

    fn peek(&self) -> Option<&'a str> {
        self.lines.get(self.pos).copied()
    }

    fn next_opt(&mut self) -> Option<(usize, &'a str)> {
        let line = self.peek()?;
        self.pos += 1;
        Some((self.pos - 1, line))
    }

    fn next(&mut self, what: &str) -> Result<(usize, &'a str)> {
        let at = self.pos;
        self.next_opt().ok_or_else(|| self.err(at, format!("unexpected end of file, expected {what}")))
    }

    fn expect(&mut self, header: &str) -> Result<()> {
        let (i, line) = self.next(header)?;
        if line.trim() != header {
            return Err(self.err(i, format!("expected {header}, found {line:?}")));
        }
        Ok(())
    }

    /// `key=value` lines up to the next section header.
    fn kv_block(&mut self) -> Result<KeyValues> {
        let start = self.pos;
        while self.peek().is_some_and(|l| !l.starts_with('[')) {
            self.pos += 1;
        }
        let text = self.lines[start..self.pos].join("\n");
        KeyValues::parse(&text, self.origin).map_err(|e| match e {
            Error::Parse { msg, line, .. } => self.err(start + line - 1, msg),
            other => other,
        })
    }

    fn matrix<T: Scalar>(&mut self, header: &str, shape: &[usize]) -> Result<Tensor<T>> {
        let expected = format!("[{header} {}x{}]", shape[0], shape[1]);
        self.expect(&expected)?;
        let mut values = Vec::with_capacity(shape[0] * shape[1]);
        for _ in 0..shape[0] {
            let (i, line) = self.next(header)?;
            let before = values.len();
            for tok in line.split_whitespace() {
                values.push(tok.parse::<T>().map_err(|_| self.err(i, format!("bad real {tok:?}")))?);
            }
            if values.len() - before != shape[1] {
                return Err(self.err(i, format!("row has {} values, expected {}", values.len() - before, shape[1])));
            }
        }
        Tensor::new(shape, values)
    }
}
