use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

pub const INIT_STD: f64 = 0.02;

/// Which sub-network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Token embeddings shared by every stack.
    Embedding,
    Encoder,
    /// Causal dialogue decoder and its output projection.
    Dialogue,
    /// Auxiliary target-masked decoder and its output projection.
    Auxiliary,
}

impl ParamGroup {
    pub fn of(name: &str) -> ParamGroup {
        if name.starts_with("enc.") {
            ParamGroup::Encoder
        } else if name.starts_with("dec.") {
            ParamGroup::Dialogue
        } else if name.starts_with("aux.") {
            ParamGroup::Auxiliary
        } else {
            ParamGroup::Embedding
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum InitKind {
    Normal,
    Zeros,
    Ones,
}

fn attn_layout(out: &mut Vec<(String, Vec<usize>, InitKind)>, prefix: &str, h: usize) {
    for p in ["q", "k", "v", "o"] {
        out.push((format!("{prefix}.{p}.w"), vec![h, h], InitKind::Normal));
        out.push((format!("{prefix}.{p}.b"), vec![h], InitKind::Zeros));
    }
}

fn ln_layout(out: &mut Vec<(String, Vec<usize>, InitKind)>, prefix: &str, h: usize) {
    out.push((format!("{prefix}.g"), vec![h], InitKind::Ones));
    out.push((format!("{prefix}.b"), vec![h], InitKind::Zeros));
}

fn ffn_layout(out: &mut Vec<(String, Vec<usize>, InitKind)>, prefix: &str, h: usize, f: usize) {
    out.push((format!("{prefix}.w1"), vec![h, f], InitKind::Normal));
    out.push((format!("{prefix}.b1"), vec![f], InitKind::Zeros));
    out.push((format!("{prefix}.w2"), vec![f, h], InitKind::Normal));
    out.push((format!("{prefix}.b2"), vec![h], InitKind::Zeros));
}

fn decoder_layout(
    out: &mut Vec<(String, Vec<usize>, InitKind)>,
    stack: &str,
    layers: usize,
    cfg: &ModelConfig,
) {
    let (h, f) = (cfg.hidden, cfg.ffn_dim);
    for l in 0..layers {
        let p = format!("{stack}.{l}");
        ln_layout(out, &format!("{p}.ln1"), h);
        attn_layout(out, &format!("{p}.self"), h);
        ln_layout(out, &format!("{p}.ln2"), h);
        attn_layout(out, &format!("{p}.cross"), h);
        ln_layout(out, &format!("{p}.ln3"), h);
        ffn_layout(out, &format!("{p}.ffn"), h, f);
    }
    ln_layout(out, &format!("{stack}.ln_f"), h);
    out.push((format!("{stack}.out.w"), vec![h, cfg.vocab_size], InitKind::Normal));
    out.push((format!("{stack}.out.b"), vec![cfg.vocab_size], InitKind::Zeros));
}

/// Names, shapes and initializers of every parameter, in creation order.
pub(crate) fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, InitKind)> {
    let h = cfg.hidden;
    let mut out = vec![("embed".to_string(), vec![cfg.vocab_size, h], InitKind::Normal)];
    for l in 0..cfg.enc_layers {
        let p = format!("enc.{l}");
        ln_layout(&mut out, &format!("{p}.ln1"), h);
        attn_layout(&mut out, &format!("{p}.self"), h);
        ln_layout(&mut out, &format!("{p}.ln2"), h);
        ffn_layout(&mut out, &format!("{p}.ffn"), h, cfg.ffn_dim);
    }
    ln_layout(&mut out, "enc.ln_f", h);
    decoder_layout(&mut out, "dec", cfg.dec_layers, cfg);
    decoder_layout(&mut out, "aux", cfg.aux_layers, cfg);
    out
}

/// Parameter counts per group without allocating any tensors.
pub fn param_counts(cfg: &ModelConfig) -> HashMap<ParamGroup, usize> {
    let mut counts = HashMap::new();
    for (name, shape, _) in layout(cfg) {
        *counts.entry(ParamGroup::of(&name)).or_insert(0) += shape.iter().product::<usize>();
    }
    counts
}

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, kind) in layout(cfg) {
            let t = match kind {
                InitKind::Normal => {
                    Tensor::from_fn(shape, |_| T::from_f64_lossy(normal.sample(&mut rng)))
                }
                InitKind::Zeros => Tensor::zeros(shape),
                InitKind::Ones => Tensor::from_fn(shape, |_| T::one()),
            };
            names.push(name);
            tensors.push(t);
        }
        Self::from_parts(names, tensors)
    }

    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor<T>>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        ParamStore {
            names,
            tensors,
            index,
        }
    }

    /// Checks names and shapes against the layout `cfg` implies.
    pub fn check_layout(&self, cfg: &ModelConfig) -> Result<()> {
        let want = layout(cfg);
        if want.len() != self.names.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                want.len(),
                self.names.len()
            )));
        }
        for ((name, shape, _), (have_name, t)) in want.iter().zip(self.iter()) {
            if name != have_name || shape.as_slice() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` {:?} does not match expected `{}` {:?}",
                    have_name,
                    t.shape(),
                    name,
                    shape
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn get(&self, id: usize) -> &Tensor<T> {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor<T> {
        &mut self.tensors[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Flattened copy of every value, in layout order.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn assign_flat(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.total_len());
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }
}
