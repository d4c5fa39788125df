//! Per-identity learnable prompt tokens and prompt assembly.
//!
//! Each identity gets M learnable word-embedding-shaped vectors that fill
//! the slots of a fixed template ("a photo of a [slots] person."). The
//! whole bank is one parameter array; gathering rows from it on the tape
//! is what routes gradients back into exactly one identity's slots.

use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

/// Default init scale for the learnable tokens.
pub const TOKEN_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub prefix_text: String,
    pub suffix_text: String,
    /// Number of learnable slots per identity.
    pub m: usize,
    pub l_ctx: usize,
}

impl PromptTemplate {
    pub fn person(m: usize, l_ctx: usize) -> Self {
        PromptTemplate {
            prefix_text: "a photo of a".into(),
            suffix_text: "person.".into(),
            m,
            l_ctx,
        }
    }

    pub fn vehicle(m: usize, l_ctx: usize) -> Self {
        PromptTemplate {
            prefix_text: "a photo of a".into(),
            suffix_text: "vehicle.".into(),
            m,
            l_ctx,
        }
    }

    /// Resolve the template against a vocabulary, checking the length
    /// invariant len(prefix) + M + len(suffix) + 2 <= L_ctx.
    pub fn plan(&self, vocab: &Vocabulary) -> Result<PromptPlan> {
        let prefix_ids = vocab.word_ids(&self.prefix_text)?;
        let suffix_ids = vocab.word_ids(&self.suffix_text)?;
        let used = prefix_ids.len() + self.m + suffix_ids.len() + 2;
        if used > self.l_ctx {
            return Err(Error::Config(alloc::format!(
                "prompt template needs {used} positions but L_ctx = {}",
                self.l_ctx
            )));
        }
        Ok(PromptPlan { prefix_ids, suffix_ids, m: self.m, l_ctx: self.l_ctx })
    }
}

/// A template resolved to vocabulary ids.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptPlan {
    pub prefix_ids: Vec<usize>,
    pub suffix_ids: Vec<usize>,
    pub m: usize,
    pub l_ctx: usize,
}

impl PromptPlan {
    /// Row index of the first learnable slot (after [SOS] and the prefix).
    pub fn slot_start(&self) -> usize {
        1 + self.prefix_ids.len()
    }

    pub fn eos_pos(&self) -> usize {
        self.slot_start() + self.m + self.suffix_ids.len()
    }
}

/// N_ids × M learnable tokens of width D_word, stored flat as an
/// (N_ids·M) × D_word parameter.
#[derive(Debug, Clone, Copy)]
pub struct TokenBank {
    pub param: ParamId,
    pub n_ids: usize,
    pub m: usize,
    pub d_word: usize,
}

pub const TOKEN_BANK_PARAM: &str = "prompt.token_bank";

/// Gaussian init (std `TOKEN_INIT_STD` unless overridden), reproducible
/// for a fixed seed.
pub fn init_token_bank(
    store: &mut ParamStore,
    n_ids: usize,
    m: usize,
    d_word: usize,
    std: f64,
    seed: u64,
) -> Result<TokenBank> {
    if n_ids == 0 || d_word == 0 {
        return Err(Error::Config("token bank dims must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = if m == 0 {
        Tensor::zeros(0, d_word)
    } else {
        Tensor::randn(n_ids * m, d_word, std, &mut rng)
    };
    let param = store.add(TOKEN_BANK_PARAM, init);
    Ok(TokenBank { param, n_ids, m, d_word })
}

/// Assembled prompt: L_ctx × D_word embedding rows plus the [EOS] row
/// index the text encoder reads.
pub struct AssembledPrompt {
    pub rows: Var,
    pub eos_pos: usize,
}

/// Build the embedding sequence for one identity:
/// [SOS, prefix words, M bank rows, suffix words, EOS, PAD...].
/// `word_table` is the (vocab_size × D_word) embedding parameter.
pub fn assemble_prompt(
    graph: &mut Graph,
    id: usize,
    bank: &TokenBank,
    plan: &PromptPlan,
    word_table: Var,
) -> Result<AssembledPrompt> {
    if id >= bank.n_ids {
        return Err(Error::IdentityRange { id, n_ids: bank.n_ids });
    }
    let mut head: Vec<usize> = Vec::with_capacity(1 + plan.prefix_ids.len());
    head.push(Vocabulary::SOS);
    head.extend_from_slice(&plan.prefix_ids);

    let mut tail: Vec<usize> = Vec::new();
    tail.extend_from_slice(&plan.suffix_ids);
    tail.push(Vocabulary::EOS);
    let filled = head.len() + plan.m + tail.len();
    for _ in filled..plan.l_ctx {
        tail.push(Vocabulary::PAD);
    }

    let head_rows = graph.gather_rows(word_table, &head);
    let tail_rows = graph.gather_rows(word_table, &tail);
    let rows = if plan.m == 0 {
        graph.concat_rows(&[head_rows, tail_rows])
    } else {
        let bank_var = graph.param(bank.param);
        let slots: Vec<usize> = (0..plan.m).map(|k| id * bank.m + k).collect();
        let slot_rows = graph.gather_rows(bank_var, &slots);
        graph.concat_rows(&[head_rows, slot_rows, tail_rows])
    };
    Ok(AssembledPrompt { rows, eos_pos: plan.eos_pos() })
}
