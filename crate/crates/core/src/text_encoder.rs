//! Learnable multi-grained prompts and the frozen text encoder that turns
//! each identity's four descriptions into one unit-norm text token.
//!
//! Descriptions are fixed context words with `N` learnable prompt slots:
//!
//! | granularity | template                                   |
//! |-------------|--------------------------------------------|
//! | global      | `A photo of a [X]…[X] person`              |
//! | head        | `A photo of a [H]…[H] head of a person`    |
//! | upper       | `A photo of a [U]…[U] upper body of a person` |
//! | legs        | `A photo of [L]…[L] legs of a person`      |
//!
//! Each description is encoded on its own (the sentence embedding is the
//! end-of-sequence output projected to the joint dimension); the identity's
//! text token is the normalized mean over the active granularities.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, Var, NEG_INF};
use crate::nn::{Block, Ctx, LayerNorm};
use crate::params::{normal_mat, Group, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Global,
    Head,
    Upper,
    Legs,
}

impl Granularity {
    pub const ALL: [Granularity; 4] = [Granularity::Global, Granularity::Head, Granularity::Upper, Granularity::Legs];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn letter(self) -> char {
        ['G', 'H', 'U', 'L'][self.index()]
    }

    /// Part row for the local granularities.
    pub fn part_index(self) -> Option<usize> {
        self.index().checked_sub(1)
    }

    pub fn from_letter(c: char) -> Result<Self> {
        match c.to_ascii_uppercase() {
            'G' => Ok(Granularity::Global),
            'H' => Ok(Granularity::Head),
            'U' => Ok(Granularity::Upper),
            'L' => Ok(Granularity::Legs),
            other => Err(Error::Config(format!("unknown granularity {other:?}; use G, H, U, L"))),
        }
    }

    fn prefix(self) -> &'static [&'static str] {
        match self {
            Granularity::Legs => &["A", "photo", "of"],
            _ => &["A", "photo", "of", "a"],
        }
    }

    fn suffix(self) -> &'static [&'static str] {
        match self {
            Granularity::Global => &["person"],
            Granularity::Head => &["head", "of", "a", "person"],
            Granularity::Upper => &["upper", "body", "of", "a", "person"],
            Granularity::Legs => &["legs", "of", "a", "person"],
        }
    }
}

/// Non-empty subset of granularities, e.g. `GHUL` or `G`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct GranularitySet([bool; 4]);

impl GranularitySet {
    pub fn all() -> Self {
        Self([true; 4])
    }

    pub fn global_only() -> Self {
        Self([true, false, false, false])
    }

    pub fn contains(&self, g: Granularity) -> bool {
        self.0[g.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = Granularity> + '_ {
        Granularity::ALL.into_iter().filter(|g| self.contains(*g))
    }

    pub fn len(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Active part rows (0 head, 1 upper, 2 legs).
    pub fn parts(&self) -> Vec<usize> {
        self.iter().filter_map(Granularity::part_index).collect()
    }
}

impl Default for GranularitySet {
    fn default() -> Self {
        Self::all()
    }
}

impl FromStr for GranularitySet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut set = [false; 4];
        for c in s.chars().filter(|c| !matches!(c, ',' | '+' | ' ')) {
            set[Granularity::from_letter(c)?.index()] = true;
        }
        if !set.iter().any(|&b| b) {
            return Err(Error::Config("granularity set must not be empty".into()));
        }
        Ok(Self(set))
    }
}

impl TryFrom<String> for GranularitySet {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<GranularitySet> for String {
    fn from(g: GranularitySet) -> String {
        g.to_string()
    }
}

impl fmt::Display for GranularitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for g in self.iter() {
            write!(f, "{}", g.letter())?;
        }
        Ok(())
    }
}

/// Learnable prompt embeddings, `N×D_prompt` per (identity, granularity).
#[derive(Clone, Debug)]
pub struct PromptSet {
    pub num_ids: usize,
    pub num_prompts: usize,
    pub dim: usize,
    pub store: ParamStore,
}

pub const PROMPT_INIT_STD: f64 = 0.002;

impl PromptSet {
    pub fn init(num_ids: usize, num_prompts: usize, dim: usize, seed: u64) -> Result<Self> {
        if num_ids == 0 || num_prompts == 0 || dim == 0 {
            return Err(Error::Config("prompt set needs C, N and D_prompt >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for c in 0..num_ids {
            for g in Granularity::ALL {
                store.add(
                    format!("prompt.{c}.{}", g.letter()),
                    Group::Prompts,
                    normal_mat(&mut rng, num_prompts, dim, PROMPT_INIT_STD),
                );
            }
        }
        Ok(Self { num_ids, num_prompts, dim, store })
    }

    pub fn param_id(&self, id: usize, g: Granularity) -> usize {
        id * 4 + g.index()
    }

    pub fn get(&self, id: usize, g: Granularity) -> &Mat {
        self.store.value(self.param_id(id, g))
    }

    pub fn get_mut(&mut self, id: usize, g: Granularity) -> &mut Mat {
        let pid = self.param_id(id, g);
        self.store.value_mut(pid)
    }

    pub fn num_vectors(&self) -> usize {
        self.num_ids * 4 * self.num_prompts
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Word(usize),
    Prompt(usize),
}

/// One tokenized description: start token, template words with prompt
/// slots, end token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Description {
    pub id: usize,
    pub granularity: Granularity,
    pub slots: Vec<Slot>,
}

impl Description {
    pub fn eot_position(&self) -> usize {
        self.slots.len() - 1
    }

    /// The fixed words with prompt slots shown as `[X]`-style markers.
    pub fn render(&self, vocab: &[&str]) -> String {
        let marker = ['X', 'H', 'U', 'L'][self.granularity.index()];
        self.slots[1..self.slots.len() - 1]
            .iter()
            .map(|s| match s {
                Slot::Word(w) => vocab[*w].to_string(),
                Slot::Prompt(_) => format!("[{marker}]"),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub const SOT: &str = "<sot>";
pub const EOT: &str = "<eot>";

/// Every distinct template word plus the start and end markers.
pub fn vocabulary() -> Vec<&'static str> {
    let mut v = vec![SOT, EOT];
    for g in Granularity::ALL {
        for w in g.prefix().iter().chain(g.suffix()) {
            if !v.contains(w) {
                v.push(w);
            }
        }
    }
    v
}

fn word_index(vocab: &[&str], w: &str) -> usize {
    vocab.iter().position(|v| *v == w).expect("template word is in the vocabulary")
}

pub fn build_description(id: usize, g: Granularity, prompts: &PromptSet) -> Result<Description> {
    if id >= prompts.num_ids {
        return Err(Error::Config(format!("id {id} out of range for {} ids", prompts.num_ids)));
    }
    let vocab = vocabulary();
    let mut slots = vec![Slot::Word(word_index(&vocab, SOT))];
    slots.extend(g.prefix().iter().map(|w| Slot::Word(word_index(&vocab, w))));
    slots.extend((0..prompts.num_prompts).map(Slot::Prompt));
    slots.extend(g.suffix().iter().map(|w| Slot::Word(word_index(&vocab, w))));
    slots.push(Slot::Word(word_index(&vocab, EOT)));
    Ok(Description { id, granularity: g, slots })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub num_prompts: usize,
    pub context_len: usize,
    pub seed: u64,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self { width: 64, layers: 2, heads: 4, embed_dim: 32, num_prompts: 4, context_len: 24, seed: 17 }
    }
}

/// Frozen causal transformer over template words and prompt slots.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub config: TextConfig,
    pub store: ParamStore,
    token_embedding: usize,
    positional: usize,
    blocks: Vec<Block>,
    ln_final: LayerNorm,
    projection: usize,
}

impl TextEncoder {
    pub fn new(config: TextConfig) -> Result<Self> {
        if !config.width.is_multiple_of(config.heads) {
            return Err(Error::Config("text width must be divisible by its head count".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let group = Group::TextEncoder;
        let d = config.width;
        let vocab = vocabulary();
        let token_embedding = store.add("text.token_embedding", group, normal_mat(&mut rng, vocab.len(), d, 0.02));
        let positional = store.add("text.positional", group, normal_mat(&mut rng, config.context_len, d, 0.01));
        let blocks = (0..config.layers)
            .map(|l| Block::new(&mut store, &format!("text.block{l}"), group, d, config.heads, config.layers, &mut rng))
            .collect();
        let ln_final = LayerNorm::new(&mut store, "text.ln_final", group, d);
        let projection =
            store.add("text.projection", group, normal_mat(&mut rng, d, config.embed_dim, (d as f64).powf(-0.5)));
        Ok(Self { config, store, token_embedding, positional, blocks, ln_final, projection })
    }

    fn causal_mask(len: usize) -> Mat {
        Mat::from_shape_fn((len, len), |(i, j)| if j > i { NEG_INF } else { 0.0 })
    }

    /// Sentence embedding (`1×d`, unnormalized) of one description. Prompt
    /// rows come from `prompts`, bound through `prompt_ctx`.
    pub fn sentence_embedding(
        &self,
        g: &mut Graph,
        desc: &Description,
        prompts: &PromptSet,
        prompt_ctx: &Ctx,
    ) -> Result<Var> {
        let len = desc.slots.len();
        if len > self.config.context_len {
            return Err(Error::Config(format!(
                "description of {len} tokens exceeds context length {}",
                self.config.context_len
            )));
        }
        if prompts.dim != self.config.width {
            return Err(Error::Shape(format!(
                "prompt dim {} differs from text width {}",
                prompts.dim, self.config.width
            )));
        }
        let frozen = crate::nn::frozen;
        let ctx = Ctx::new(&self.store, &frozen);
        let words = ctx.bind(g, self.token_embedding);
        let slots = prompt_ctx.bind(g, prompts.param_id(desc.id, desc.granularity));
        let table = g.concat_rows(&[words, slots]);
        let vocab_len = self.store.value(self.token_embedding).nrows();
        let index = desc
            .slots
            .iter()
            .map(|s| match s {
                Slot::Word(w) => Some(*w),
                Slot::Prompt(p) => Some(vocab_len + p),
            })
            .collect();
        let tokens = g.gather_rows(table, index);
        let pos_all = ctx.bind(g, self.positional);
        let pos = g.select_rows(pos_all, &(0..len).collect::<Vec<_>>());
        let mut x = g.add(tokens, pos);
        let mask = [Self::causal_mask(len)];
        for block in &self.blocks {
            x = block.forward(g, &ctx, x, 1, Some(&mask));
        }
        let x = self.ln_final.forward(g, &ctx, x);
        let eot = g.select_rows(x, &[desc.eot_position()]);
        let proj = ctx.bind(g, self.projection);
        Ok(g.matmul(eot, proj))
    }

    /// Unit-norm multi-grained text token (`1×d`) of identity `id`.
    pub fn encode_id(
        &self,
        g: &mut Graph,
        id: usize,
        prompts: &PromptSet,
        granularities: GranularitySet,
        prompt_ctx: &Ctx,
    ) -> Result<Var> {
        let mut parts = Vec::with_capacity(4);
        for gran in granularities.iter() {
            let desc = build_description(id, gran, prompts)?;
            parts.push(self.sentence_embedding(g, &desc, prompts, prompt_ctx)?);
        }
        let stacked = g.concat_rows(&parts);
        let k = parts.len();
        let avg = g.constant(Mat::from_elem((1, k), 1.0 / k as f64));
        let mean = g.matmul(avg, stacked);
        Ok(g.row_normalize(mean))
    }

    /// Text tokens of every identity as a `C×d` matrix of unit rows.
    pub fn encode_all(&self, prompts: &PromptSet, granularities: GranularitySet) -> Result<Mat> {
        let frozen = crate::nn::frozen;
        let ctx = Ctx::new(&prompts.store, &frozen);
        let mut out = Mat::zeros((prompts.num_ids, self.config.embed_dim));
        for c in 0..prompts.num_ids {
            let mut g = Graph::new();
            let t = self.encode_id(&mut g, c, prompts, granularities, &ctx)?;
            out.row_mut(c).assign(&g.value(t).row(0));
        }
        Ok(out)
    }
}

/// Random prompt set with the same shape as `like`.
pub fn perturbed(like: &PromptSet, std: f64, rng: &mut impl Rng) -> PromptSet {
    let mut out = like.clone();
    for id in 0..like.store.len() {
        let v = out.store.value_mut(id);
        let noise = normal_mat(rng, v.nrows(), v.ncols(), std);
        *v += &noise;
    }
    out
}
