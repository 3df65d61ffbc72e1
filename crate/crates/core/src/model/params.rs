use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::Scalar;

use super::config::ModelConfig;

/// Named parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TensorId {
    TokEmb,
    PosEmb,
    Ln1(usize),
    Wq(usize),
    Wk(usize),
    Wv(usize),
    Wo(usize),
    Ln2(usize),
    W1(usize),
    B1(usize),
    W2(usize),
    B2(usize),
    LnF,
    Unembed,
}

impl TensorId {
    pub fn name(&self) -> String {
        match self {
            Self::TokEmb => "tok_emb".into(),
            Self::PosEmb => "pos_emb".into(),
            Self::Ln1(l) => format!("layers.{l}.ln1"),
            Self::Wq(l) => format!("layers.{l}.wq"),
            Self::Wk(l) => format!("layers.{l}.wk"),
            Self::Wv(l) => format!("layers.{l}.wv"),
            Self::Wo(l) => format!("layers.{l}.wo"),
            Self::Ln2(l) => format!("layers.{l}.ln2"),
            Self::W1(l) => format!("layers.{l}.w1"),
            Self::B1(l) => format!("layers.{l}.b1"),
            Self::W2(l) => format!("layers.{l}.w2"),
            Self::B2(l) => format!("layers.{l}.b2"),
            Self::LnF => "ln_f".into(),
            Self::Unembed => "unembed".into(),
        }
    }

    /// Norm gains and biases are exempt from weight decay.
    pub fn is_matrix(&self) -> bool {
        !matches!(
            self,
            Self::Ln1(_) | Self::Ln2(_) | Self::LnF | Self::B1(_) | Self::B2(_)
        )
    }
}

/// Offsets of every tensor inside the flat parameter buffer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    entries: Vec<(TensorId, Vec<usize>, Range<usize>)>,
    n_layers: usize,
    total: usize,
}

impl Layout {
    pub fn new(c: &ModelConfig) -> Self {
        let (d, f, v) = (c.d_model, c.d_ff, c.vocab_size);
        let mut shapes = vec![
            (TensorId::TokEmb, vec![v, d]),
            (TensorId::PosEmb, vec![c.max_seq, d]),
        ];
        for l in 0..c.n_layers {
            shapes.extend([
                (TensorId::Ln1(l), vec![d]),
                (TensorId::Wq(l), vec![d, d]),
                (TensorId::Wk(l), vec![d, d]),
                (TensorId::Wv(l), vec![d, d]),
                (TensorId::Wo(l), vec![d, d]),
                (TensorId::Ln2(l), vec![d]),
                (TensorId::W1(l), vec![d, f]),
                (TensorId::B1(l), vec![f]),
                (TensorId::W2(l), vec![f, d]),
                (TensorId::B2(l), vec![d]),
            ]);
        }
        shapes.push((TensorId::LnF, vec![d]));
        shapes.push((TensorId::Unembed, vec![d, v]));
        let mut offset = 0;
        let entries = shapes
            .into_iter()
            .map(|(id, shape)| {
                let len: usize = shape.iter().product();
                let r = offset..offset + len;
                offset += len;
                (id, shape, r)
            })
            .collect();
        Self {
            entries,
            n_layers: c.n_layers,
            total: offset,
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    fn index(&self, id: TensorId) -> usize {
        match id {
            TensorId::TokEmb => 0,
            TensorId::PosEmb => 1,
            TensorId::LnF => 2 + 10 * self.n_layers,
            TensorId::Unembed => 3 + 10 * self.n_layers,
            TensorId::Ln1(l) => 2 + 10 * l,
            TensorId::Wq(l) => 3 + 10 * l,
            TensorId::Wk(l) => 4 + 10 * l,
            TensorId::Wv(l) => 5 + 10 * l,
            TensorId::Wo(l) => 6 + 10 * l,
            TensorId::Ln2(l) => 7 + 10 * l,
            TensorId::W1(l) => 8 + 10 * l,
            TensorId::B1(l) => 9 + 10 * l,
            TensorId::W2(l) => 10 + 10 * l,
            TensorId::B2(l) => 11 + 10 * l,
        }
    }

    pub fn range(&self, id: TensorId) -> Range<usize> {
        self.entries[self.index(id)].2.clone()
    }

    pub fn entries(&self) -> impl Iterator<Item = (TensorId, &[usize], Range<usize>)> {
        self.entries.iter().map(|(id, s, r)| (*id, s.as_slice(), r.clone()))
    }
}

/// All model weights in one flat buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T: Scalar> {
    pub config: ModelConfig,
    layout: Layout,
    data: Vec<T>,
}

impl<T: Scalar> Params<T> {
    /// GPT-2 style initialisation: N(0, 0.02) weights, residual-writing
    /// projections scaled by 1/sqrt(2L), unit norm gains, zero biases.
    /// Embeddings use N(0, 1/d_model) so residual rows start near unit norm.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        let mut data = vec![T::zero(); layout.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let base = 0.02;
        let resid = base / (2.0 * config.n_layers as f64).sqrt();
        for (id, _, range) in layout.entries() {
            let slot = &mut data[range];
            let std = match id {
                TensorId::Ln1(_) | TensorId::Ln2(_) | TensorId::LnF => {
                    slot.fill(T::one());
                    continue;
                }
                TensorId::B1(_) | TensorId::B2(_) => continue,
                TensorId::Wo(_) | TensorId::W2(_) => resid,
                TensorId::TokEmb | TensorId::PosEmb => 1.0 / (config.d_model as f64).sqrt(),
                _ => base,
            };
            let normal = Normal::new(0.0, std).expect("valid std");
            for x in slot.iter_mut() {
                *x = T::lit(normal.sample(&mut rng));
            }
        }
        Ok(Self {
            config: config.clone(),
            layout,
            data,
        })
    }

    pub fn from_flat(config: &ModelConfig, data: Vec<T>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        if data.len() != layout.total() {
            return Err(crate::error::Error::Dimension(format!(
                "expected {} parameters, got {}",
                layout.total(),
                data.len()
            )));
        }
        Ok(Self {
            config: config.clone(),
            layout,
            data,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn flat(&self) -> &[T] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn get(&self, id: TensorId) -> &[T] {
        &self.data[self.layout.range(id)]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            config: self.config.clone(),
            layout: self.layout.clone(),
            data: self.data.iter().map(|x| U::lit(x.as_f64())).collect(),
        }
    }
}
