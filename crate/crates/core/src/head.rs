//! Embedding lookup and softmax projection, optionally tied.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Input embedding and output projection of a language model.
///
/// When tied, the decoder weight *is* `embedding` (`vocab × emb`) and no
/// second matrix exists: logits are `embedding · features + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct LMHead {
    pub embedding: Tensor,
    /// Separate `vocab × features` decoder weight; `None` when tied.
    pub decoder: Option<Tensor>,
    pub bias: Tensor,
}

/// Counts of trainable scalars in an [`LMHead`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadCounts {
    pub embedding: usize,
    pub decoder_weight: usize,
    pub decoder_bias: usize,
}

impl HeadCounts {
    pub fn total(&self) -> usize {
        self.embedding + self.decoder_weight + self.decoder_bias
    }
}

impl LMHead {
    /// Embedding rows drawn from `U(-init_range, init_range)`; decoder bias zero.
    pub fn new(
        vocab: usize,
        emb: usize,
        feature_size: usize,
        tied: bool,
        init_range: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if vocab == 0 || emb == 0 || feature_size == 0 {
            return Err(Error::config("vocabulary, embedding and feature sizes must be positive"));
        }
        if tied && emb != feature_size {
            return Err(Error::config(format!(
                "tied embedding needs embedding size ({emb}) equal to the last hidden size ({feature_size})"
            )));
        }
        let mut draw = |rows: usize, cols: usize| {
            let data = (0..rows * cols)
                .map(|_| rng.random_range(-init_range..=init_range))
                .collect();
            Tensor::new(&[rows, cols], data)
        };
        let embedding = draw(vocab, emb)?;
        let decoder = if tied { None } else { Some(draw(vocab, feature_size)?) };
        Ok(Self {
            embedding,
            decoder,
            bias: Tensor::zeros(&[vocab]),
        })
    }

    pub fn is_tied(&self) -> bool {
        self.decoder.is_none()
    }

    pub fn vocab(&self) -> usize {
        self.embedding.rows()
    }

    pub fn emb(&self) -> usize {
        self.embedding.cols()
    }

    pub fn counts(&self) -> HeadCounts {
        Self::counts_for(self.vocab(), self.emb(), self.decoder.as_ref().map(Tensor::cols), self.is_tied())
    }

    /// Trainables of a head without building it.
    pub fn counts_for(vocab: usize, emb: usize, feature_size: Option<usize>, tied: bool) -> HeadCounts {
        HeadCounts {
            embedding: vocab * emb,
            decoder_weight: if tied { 0 } else { vocab * feature_size.unwrap_or(emb) },
            decoder_bias: vocab,
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundHead {
        let mut leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let embedding = leaf(&self.embedding);
        let decoder = self.decoder.as_ref().map(&mut leaf);
        let bias = leaf(&self.bias);
        BoundHead {
            embedding,
            decoder,
            bias,
        }
    }
}

/// An [`LMHead`] recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundHead {
    pub embedding: Var,
    pub decoder: Option<Var>,
    pub bias: Var,
}

impl BoundHead {
    pub fn decoder_weight(&self) -> Var {
        self.decoder.unwrap_or(self.embedding)
    }
}

/// `features` is `feature_size × positions`; returns `vocab × positions` logits.
pub fn lm_head_forward(tape: &mut Tape, head: &BoundHead, features: Var) -> Result<Var> {
    let w = head.decoder_weight();
    let logits = tape.matmul(w, features)?;
    tape.add_bias(logits, head.bias)
}
