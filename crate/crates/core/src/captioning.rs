//! Multi-modal captioner.
//!
//! Each modality stream has its own encoder and decoder. Encoders are
//! position-wise only: a projection plus sinusoidal positions, then residual
//! feed-forward blocks with layer normalization and no self-attention.
//! Decoders use masked self-attention over the caption prefix and
//! cross-attention to their stream's encoding. Decoder states of all streams
//! are concatenated and a two-layer head maps them to the vocabulary.
//!
//! Several captions are processed at once by stacking their rows and using
//! block-diagonal attention masks, so one graph node covers the whole batch.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var, LOG_CLAMP};
use crate::error::{invalid, shape_err, Error, Result};
use crate::metrics::tokenize;
use crate::nn::{sinusoid, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Additive mask value for blocked attention entries.
const BLOCKED: f64 = -1e30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Visual,
    Audio,
    Speech,
    CommonSense,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Audio => "audio",
            Modality::Speech => "speech",
            Modality::CommonSense => "common_sense",
        }
    }
}

/// Per-frame (or per-token) features of one modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityTrack {
    pub modality: Modality,
    pub features: Tensor,
    pub timestamps: Vec<f64>,
}

impl ModalityTrack {
    pub fn new(modality: Modality, features: Tensor, timestamps: Vec<f64>) -> Result<Self> {
        let t = Self {
            modality,
            features,
            timestamps,
        };
        t.check_shape()?;
        Ok(t)
    }

    fn check_shape(&self) -> Result<()> {
        if self.features.rows() == 0 {
            return Err(invalid(format!("{:?} track has no rows", self.modality)));
        }
        if self.features.rows() != self.timestamps.len() {
            return Err(shape_err(format!(
                "{:?} track has {} rows but {} timestamps",
                self.modality,
                self.features.rows(),
                self.timestamps.len()
            )));
        }
        if self.timestamps.windows(2).any(|w| w[1] < w[0]) {
            return Err(invalid(format!("{:?} timestamps decrease", self.modality)));
        }
        Ok(())
    }

    pub fn validate(&self, dim: usize, duration: f64) -> Result<()> {
        self.check_shape()?;
        if self.features.cols() != dim {
            return Err(shape_err(format!(
                "{:?} track has dim {}, expected {dim}",
                self.modality,
                self.features.cols()
            )));
        }
        if self
            .timestamps
            .iter()
            .any(|&t| t < 0.0 || t > duration + 1e-9)
        {
            return Err(invalid(format!(
                "{:?} timestamp outside [0, {duration}]",
                self.modality
            )));
        }
        Ok(())
    }

    /// Rows whose timestamp lies in `[start, end]`.
    pub fn crop(&self, start: f64, end: f64) -> Option<ModalityTrack> {
        let keep: Vec<usize> = (0..self.timestamps.len())
            .filter(|&i| self.timestamps[i] >= start && self.timestamps[i] <= end)
            .collect();
        if keep.is_empty() {
            return None;
        }
        let rows: Vec<&[f64]> = keep.iter().map(|&i| self.features.row(i)).collect();
        Some(ModalityTrack {
            modality: self.modality,
            features: Tensor::from_rows(&rows),
            timestamps: keep.iter().map(|&i| self.timestamps[i]).collect(),
        })
    }
}

/// Token/id bijection with fixed special ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub const PAD: usize = 0;
    pub const START: usize = 1;
    pub const END: usize = 2;
    pub const UNK: usize = 3;
    const SPECIALS: [&'static str; 4] = ["<pad>", "<start>", "<end>", "<unk>"];

    /// Specials followed by the sorted distinct tokens of `texts`.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(tokenize).collect();
        let tokens = Self::SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        Self::from_tokens(tokens).expect("specials are distinct from tokenized words")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 4 || tokens[..4].iter().zip(Self::SPECIALS).any(|(a, b)| a != b) {
            return Err(invalid(
                "vocabulary must start with <pad> <start> <end> <unk>",
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Rebuilds the lookup table after deserializing.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(Self::UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or("<unk>")
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Token ids of `text` followed by the end id.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text)
            .iter()
            .map(|t| self.id(t))
            .chain([Self::END])
            .collect()
    }

    /// Words up to the first end id, skipping specials.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != Self::END)
            .filter(|&&i| i > Self::UNK)
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Caption {
    pub token_ids: Vec<usize>,
    pub text: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 1.0,
            l2: 1.0,
            l3: 1.0,
            l4: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(l1: f64, l2: f64, l3: f64, l4: f64) -> Result<Self> {
        let w = Self { l1, l2, l3, l4 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.as_array();
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(invalid(format!(
                "loss weights must be finite and nonnegative: {all:?}"
            )));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(invalid("loss weights are all zero"));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.l1, self.l2, self.l3, self.l4]
    }
}

/// Weighted sum of four named loss components; a non-finite component is
/// reported by name.
pub fn weighted_total(
    names: [&str; 4],
    components: [f64; 4],
    weights: &LossWeights,
) -> Result<f64> {
    for (name, c) in names.iter().zip(components) {
        if !c.is_finite() {
            return Err(Error::NonFinite(format!("{name} = {c}")));
        }
    }
    Ok(components
        .iter()
        .zip(weights.as_array())
        .map(|(c, w)| c * w)
        .sum())
}

/// `λ1·L_p + λ2·L_cs + λ3·L_m + λ4·L_c`.
pub fn dvc_total_loss(
    l_p: f64,
    l_cs: f64,
    l_m: f64,
    l_c: f64,
    weights: &LossWeights,
) -> Result<f64> {
    weighted_total(
        ["L_p", "L_cs", "L_m", "L_c"],
        [l_p, l_cs, l_m, l_c],
        weights,
    )
}

/// Graph form of the weighted sum.
pub fn weighted_total_graph(g: &mut Graph, components: [Var; 4], weights: &LossWeights) -> Var {
    let mut terms = Vec::new();
    for (c, w) in components.into_iter().zip(weights.as_array()) {
        if w != 0.0 {
            terms.push(g.scale(c, w));
        }
    }
    let mut total = terms
        .first()
        .copied()
        .unwrap_or_else(|| g.constant(Tensor::scalar(0.0)));
    for t in terms.iter().skip(1) {
        total = g.add(total, *t);
    }
    total
}

/// Mean cross entropy over non-pad targets; rows of `distributions` are
/// per-step probabilities.
pub fn caption_loss(distributions: &[Vec<f64>], targets: &[usize]) -> Result<f64> {
    if distributions.len() != targets.len() {
        return Err(shape_err(format!(
            "{} steps for {} targets",
            distributions.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (p, &t) in distributions.iter().zip(targets) {
        if t == Vocabulary::PAD {
            continue;
        }
        let prob = p
            .get(t)
            .ok_or_else(|| invalid(format!("target id {t} outside vocabulary of {}", p.len())))?;
        total -= prob.max(LOG_CLAMP).ln();
        count += 1;
    }
    if count == 0 {
        return Err(invalid("caption target is all padding"));
    }
    Ok(total / count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "size")]
pub enum StreamKind {
    /// Real-valued features of the given width.
    Features(usize),
    /// Token ids embedded with a learned table over the given vocabulary size.
    Tokens(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub modality: Modality,
    pub kind: StreamKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionerConfig {
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub encoder_depth: usize,
    pub heads: usize,
    pub fusion_hidden: usize,
    pub max_len: usize,
}

impl Default for CaptionerConfig {
    fn default() -> Self {
        Self {
            model_dim: 32,
            ffn_dim: 64,
            encoder_depth: 1,
            heads: 2,
            fusion_hidden: 64,
            max_len: 30,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ffn: FeedForward,
    pub norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub enum InputMap {
    Projection(Linear),
    Embedding(ParamId),
}

#[derive(Clone, Debug)]
pub struct ModalityEncoder {
    pub input: InputMap,
    pub blocks: Vec<EncoderBlock>,
    pub model_dim: usize,
}

/// Stacked rows of a batch for one stream, with per-item row counts.
#[derive(Clone, Debug)]
pub enum StreamData {
    Features(Var),
    Tokens(Vec<usize>),
}

#[derive(Clone, Debug)]
pub struct StreamBatch {
    pub data: StreamData,
    pub lengths: Vec<usize>,
}

impl StreamBatch {
    pub fn features(g: &mut Graph, items: &[&Tensor]) -> Self {
        let lengths = items.iter().map(|t| t.rows()).collect();
        let stacked = Tensor::concat_rows(items);
        Self {
            data: StreamData::Features(g.constant(stacked)),
            lengths,
        }
    }

    pub fn tokens(items: &[&[usize]]) -> Self {
        Self {
            data: StreamData::Tokens(items.concat()),
            lengths: items.iter().map(|t| t.len()).collect(),
        }
    }

    fn total_rows(&self) -> usize {
        self.lengths.iter().sum()
    }
}

/// Sinusoidal positions restarting at zero for each item.
fn stacked_positions(lengths: &[usize], dim: usize) -> Tensor {
    let total: usize = lengths.iter().sum();
    let mut out = Tensor::zeros(total, dim);
    let mut row = 0;
    for &len in lengths {
        for p in 0..len {
            out.row_mut(row).copy_from_slice(&sinusoid(p as f64, dim));
            row += 1;
        }
    }
    out
}

impl ModalityEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        kind: StreamKind,
        config: &CaptionerConfig,
    ) -> Self {
        let h = config.model_dim;
        let input = match kind {
            StreamKind::Features(d) => {
                InputMap::Projection(Linear::new(store, rng, &format!("{name}.proj"), d, h))
            }
            StreamKind::Tokens(v) => {
                InputMap::Embedding(store.add(format!("{name}.embed"), uniform(rng, v, h, 0.5)))
            }
        };
        let blocks = (0..config.encoder_depth)
            .map(|i| EncoderBlock {
                ffn: FeedForward::new(
                    store,
                    rng,
                    &format!("{name}.block{i}.ffn"),
                    h,
                    config.ffn_dim,
                    h,
                ),
                norm: LayerNorm::new(store, &format!("{name}.block{i}.norm"), h),
            })
            .collect();
        Self {
            input,
            blocks,
            model_dim: h,
        }
    }

    /// Projection plus positions, before any block.
    pub fn embed(&self, g: &mut Graph, batch: &StreamBatch) -> Result<Var> {
        let x = match (&self.input, &batch.data) {
            (InputMap::Projection(lin), StreamData::Features(v)) => {
                let (rows, cols) = g.shape(*v);
                if cols != lin.in_dim || rows != batch.total_rows() {
                    return Err(shape_err(format!(
                        "stream input {rows}×{cols}, expected {}×{}",
                        batch.total_rows(),
                        lin.in_dim
                    )));
                }
                lin.forward(g, *v)
            }
            (InputMap::Embedding(table), StreamData::Tokens(ids)) => {
                let vocab = g.store().get(*table).rows();
                if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
                    return Err(invalid(format!(
                        "token id {bad} outside embedding table of {vocab}"
                    )));
                }
                let t = g.param(*table);
                g.gather_rows(t, ids)
            }
            _ => return Err(invalid("stream data kind does not match the encoder input")),
        };
        let pe = g.constant(stacked_positions(&batch.lengths, self.model_dim));
        Ok(g.add(x, pe))
    }

    /// `LN(x + FFN(x))` per block; no mixing across positions.
    pub fn forward(&self, g: &mut Graph, batch: &StreamBatch) -> Result<Var> {
        let mut x = self.embed(g, batch)?;
        for block in &self.blocks {
            let y = block.ffn.forward(g, x);
            let sum = g.add(x, y);
            x = block.norm.forward(g, sum);
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct ModalityDecoder {
    pub self_attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attention: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
}

impl ModalityDecoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        config: &CaptionerConfig,
    ) -> Self {
        let h = config.model_dim;
        Self {
            self_attention: MultiHeadAttention::new(
                store,
                rng,
                &format!("{name}.self"),
                h,
                config.heads,
            ),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), h),
            cross_attention: MultiHeadAttention::new(
                store,
                rng,
                &format!("{name}.cross"),
                h,
                config.heads,
            ),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), h),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), h, config.ffn_dim, h),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), h),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        words: Var,
        memory: Var,
        self_mask: &Tensor,
        cross_mask: &Tensor,
    ) -> Var {
        let a = self
            .self_attention
            .forward(g, words, words, Some(self_mask));
        let x = g.add(words, a);
        let x = self.norm1.forward(g, x);
        let c = self.cross_attention.forward(g, x, memory, Some(cross_mask));
        let x2 = g.add(x, c);
        let x2 = self.norm2.forward(g, x2);
        let f = self.ffn.forward(g, x2);
        let x3 = g.add(x2, f);
        self.norm3.forward(g, x3)
    }
}

/// Block-diagonal causal mask over stacked prefixes.
pub fn block_causal_mask(lengths: &[usize]) -> Tensor {
    let total: usize = lengths.iter().sum();
    let mut m = Tensor::filled(total, total, BLOCKED);
    let mut off = 0;
    for &len in lengths {
        for i in 0..len {
            for j in 0..=i {
                m.set(off + i, off + j, 0.0);
            }
        }
        off += len;
    }
    m
}

/// Item `b`'s query rows see only item `b`'s memory rows.
pub fn block_cross_mask(query_lengths: &[usize], memory_lengths: &[usize]) -> Tensor {
    let (tq, tm): (usize, usize) = (query_lengths.iter().sum(), memory_lengths.iter().sum());
    let mut m = Tensor::filled(tq, tm, BLOCKED);
    let (mut qo, mut mo) = (0, 0);
    for (&lq, &lm) in query_lengths.iter().zip(memory_lengths) {
        for i in 0..lq {
            for j in 0..lm {
                m.set(qo + i, mo + j, 0.0);
            }
        }
        qo += lq;
        mo += lm;
    }
    m
}

#[derive(Clone, Debug)]
pub struct Stream {
    pub spec: StreamSpec,
    pub encoder: ModalityEncoder,
    pub decoder: ModalityDecoder,
}

#[derive(Clone, Debug)]
pub struct Captioner {
    pub config: CaptionerConfig,
    pub vocab_size: usize,
    pub word_embedding: ParamId,
    pub streams: Vec<Stream>,
    pub fusion: FeedForward,
}

/// One caption's teacher-forcing rows: inputs `[start, w1, …, w_{n-1}]`,
/// targets `[w1, …, w_n]` (with `w_n` the end id).
pub fn teacher_forcing(target: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut input = vec![Vocabulary::START];
    input.extend_from_slice(&target[..target.len().saturating_sub(1)]);
    (input, target.to_vec())
}

impl Captioner {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        streams: &[StreamSpec],
        vocab_size: usize,
        config: CaptionerConfig,
    ) -> Result<Self> {
        if streams.is_empty() {
            return Err(invalid("captioner needs at least one stream"));
        }
        if vocab_size <= Vocabulary::UNK {
            return Err(invalid("vocabulary has no ordinary tokens"));
        }
        let h = config.model_dim;
        if h == 0 || config.heads == 0 || h % config.heads != 0 {
            return Err(invalid(format!(
                "model dim {h} must be a positive multiple of {} heads",
                config.heads
            )));
        }
        let word_embedding = store.add(
            format!("{prefix}.word_embedding"),
            uniform(rng, vocab_size, h, 0.5),
        );
        let streams = streams
            .iter()
            .map(|&spec| {
                let name = format!("{prefix}.{}", spec.modality.name());
                Stream {
                    spec,
                    encoder: ModalityEncoder::new(
                        store,
                        rng,
                        &format!("{name}.enc"),
                        spec.kind,
                        &config,
                    ),
                    decoder: ModalityDecoder::new(store, rng, &format!("{name}.dec"), &config),
                }
            })
            .collect::<Vec<_>>();
        let fusion = FeedForward::new(
            store,
            rng,
            &format!("{prefix}.fusion"),
            streams.len() * h,
            config.fusion_hidden,
            vocab_size,
        );
        Ok(Self {
            config,
            vocab_size,
            word_embedding,
            streams,
            fusion,
        })
    }

    /// Encodes every stream; `batches[i]` feeds `streams[i]`.
    pub fn encode(&self, g: &mut Graph, batches: &[StreamBatch]) -> Result<Vec<Var>> {
        if batches.len() != self.streams.len() {
            return Err(shape_err(format!(
                "{} stream batches for {} streams",
                batches.len(),
                self.streams.len()
            )));
        }
        let items = batches[0].lengths.len();
        if batches
            .iter()
            .any(|b| b.lengths.len() != items || b.lengths.contains(&0))
        {
            return Err(invalid(
                "every stream needs at least one row for every item",
            ));
        }
        self.streams
            .iter()
            .zip(batches)
            .map(|(s, b)| s.encoder.forward(g, b))
            .collect()
    }

    /// `ΣL×V` log-probabilities for stacked prefixes.
    pub fn decode(
        &self,
        g: &mut Graph,
        memories: &[Var],
        memory_lengths: &[Vec<usize>],
        prefixes: &[Vec<usize>],
    ) -> Result<Var> {
        if prefixes.iter().any(Vec::is_empty) {
            return Err(invalid("decoding needs a nonempty prefix"));
        }
        if let Some(bad) = prefixes.iter().flatten().find(|&&i| i >= self.vocab_size) {
            return Err(invalid(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        let lengths: Vec<usize> = prefixes.iter().map(Vec::len).collect();
        let ids: Vec<usize> = prefixes.concat();
        let table = g.param(self.word_embedding);
        let words = g.gather_rows(table, &ids);
        let pe = g.constant(stacked_positions(&lengths, self.config.model_dim));
        let words = g.add(words, pe);
        let self_mask = block_causal_mask(&lengths);
        let mut states = Vec::with_capacity(self.streams.len());
        for ((stream, &memory), mem_lengths) in
            self.streams.iter().zip(memories).zip(memory_lengths)
        {
            let cross_mask = block_cross_mask(&lengths, mem_lengths);
            states.push(
                stream
                    .decoder
                    .forward(g, words, memory, &self_mask, &cross_mask),
            );
        }
        let fused = if states.len() == 1 {
            states[0]
        } else {
            g.concat_cols(&states)
        };
        let logits = self.fusion.forward(g, fused);
        Ok(g.log_softmax_rows(logits))
    }

    /// Summed clamped NLL over all non-pad targets and the number of them.
    pub fn teacher_forced_nll(
        &self,
        g: &mut Graph,
        batches: &[StreamBatch],
        targets: &[Vec<usize>],
    ) -> Result<(Var, usize)> {
        let memories = self.encode(g, batches)?;
        let memory_lengths: Vec<Vec<usize>> = batches.iter().map(|b| b.lengths.clone()).collect();
        self.teacher_forced_nll_from(g, &memories, &memory_lengths, targets)
    }

    pub fn teacher_forced_nll_from(
        &self,
        g: &mut Graph,
        memories: &[Var],
        memory_lengths: &[Vec<usize>],
        targets: &[Vec<usize>],
    ) -> Result<(Var, usize)> {
        let (inputs, outputs): (Vec<Vec<usize>>, Vec<Vec<usize>>) =
            targets.iter().map(|t| teacher_forcing(t)).unzip();
        let log_probs = self.decode(g, memories, memory_lengths, &inputs)?;
        let flat: Vec<usize> = outputs.concat();
        let count = flat.iter().filter(|&&t| t != Vocabulary::PAD).count();
        if count == 0 {
            return Err(invalid("caption target is all padding"));
        }
        let picked = g.pick(log_probs, &flat);
        let weights: Vec<f64> = flat
            .iter()
            .map(|&t| if t == Vocabulary::PAD { 0.0 } else { 1.0 })
            .collect();
        let w = g.constant(Tensor::col_vector(weights));
        let masked = g.mul(picked, w);
        let total = g.sum(masked);
        Ok((g.scale(total, -1.0), count))
    }

    /// Mean teacher-forced cross entropy.
    pub fn caption_loss_graph(
        &self,
        g: &mut Graph,
        batches: &[StreamBatch],
        targets: &[Vec<usize>],
    ) -> Result<Var> {
        let (total, count) = self.teacher_forced_nll(g, batches, targets)?;
        Ok(g.scale(total, 1.0 / count as f64))
    }

    /// Next-token distribution after `prefix` for a single item.
    pub fn decode_step(
        &self,
        store: &ParamStore,
        tracks: &[StreamInput],
        prefix: &[usize],
    ) -> Result<Vec<f64>> {
        if prefix.is_empty() {
            return Err(invalid("decoding needs a nonempty prefix"));
        }
        let mut g = Graph::new(store);
        let batches = single_batches(&mut g, tracks);
        let memories = self.encode(&mut g, &batches)?;
        let lengths: Vec<Vec<usize>> = batches.iter().map(|b| b.lengths.clone()).collect();
        let lp = self.decode(&mut g, &memories, &lengths, &[prefix.to_vec()])?;
        Ok(g.value(lp)
            .row(prefix.len() - 1)
            .iter()
            .map(|v| v.exp())
            .collect())
    }

    /// Greedy decoding until the end id or `max_len` tokens.
    pub fn generate(
        &self,
        store: &ParamStore,
        tracks: &[StreamInput],
        vocab: &Vocabulary,
        max_len: usize,
    ) -> Result<Caption> {
        let mut g = Graph::new(store);
        let batches = single_batches(&mut g, tracks);
        let memories = self.encode(&mut g, &batches)?;
        let lengths: Vec<Vec<usize>> = batches.iter().map(|b| b.lengths.clone()).collect();
        let mut prefix = vec![Vocabulary::START];
        let mut out = Vec::new();
        while out.len() < max_len {
            let lp = self.decode(&mut g, &memories, &lengths, &[prefix.clone()])?;
            let row = g.value(lp).row(prefix.len() - 1);
            // Pad and start are never emitted.
            let next = (Vocabulary::END..row.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                .expect("vocabulary has ordinary tokens");
            out.push(next);
            if next == Vocabulary::END {
                break;
            }
            prefix.push(next);
        }
        Ok(Caption {
            text: vocab.decode(&out),
            token_ids: out,
        })
    }
}

/// Inputs of one item for one stream.
#[derive(Clone, Debug)]
pub enum StreamInput {
    Features(Tensor),
    Tokens(Vec<usize>),
}

fn single_batches(g: &mut Graph, tracks: &[StreamInput]) -> Vec<StreamBatch> {
    tracks
        .iter()
        .map(|t| match t {
            StreamInput::Features(f) => StreamBatch::features(g, &[f]),
            StreamInput::Tokens(ids) => StreamBatch::tokens(&[ids]),
        })
        .collect()
}

/// `{video_id: {timestamps: [[s, e], …], sentences: […]}}`.
pub type CaptionFile = BTreeMap<String, VideoCaptions>;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VideoCaptions {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration: Option<f64>,
    pub timestamps: Vec<[f64; 2]>,
    pub sentences: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidences: Option<Vec<f64>>,
}

impl VideoCaptions {
    pub fn validate(&self, video_id: &str) -> Result<()> {
        if self.timestamps.len() != self.sentences.len() {
            return Err(invalid(format!(
                "{video_id}: {} timestamps but {} sentences",
                self.timestamps.len(),
                self.sentences.len()
            )));
        }
        if let Some(c) = &self.confidences {
            if c.len() != self.sentences.len() {
                return Err(invalid(format!("{video_id}: confidence count mismatch")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn vocab() -> Vocabulary {
        Vocabulary::from_texts(["a man rides a horse", "the dog runs"])
    }

    fn tiny(seed: u64, depth: usize) -> (ParamStore, Captioner, Vec<StreamInput>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let v = vocab();
        let specs = [
            StreamSpec {
                modality: Modality::Visual,
                kind: StreamKind::Features(3),
            },
            StreamSpec {
                modality: Modality::Speech,
                kind: StreamKind::Tokens(v.len()),
            },
        ];
        let config = CaptionerConfig {
            model_dim: 4,
            ffn_dim: 5,
            encoder_depth: depth,
            heads: 2,
            fusion_hidden: 6,
            max_len: 30,
        };
        let cap = Captioner::new(&mut store, &mut rng, "cap", &specs, v.len(), config).unwrap();
        let feats = Tensor::from_vec(3, 3, (0..9).map(|_| rng.random_range(-1.0..1.0)).collect());
        let inputs = vec![
            StreamInput::Features(feats),
            StreamInput::Tokens(vec![4, 5, 6]),
        ];
        (store, cap, inputs)
    }

    #[test]
    fn vocabulary_specials_and_round_trip() {
        let v = vocab();
        assert_eq!(v.token(Vocabulary::PAD), "<pad>");
        assert_eq!(v.id("zebra"), Vocabulary::UNK);
        let ids = v.encode("A man rides the dog.");
        assert_eq!(*ids.last().unwrap(), Vocabulary::END);
        assert_eq!(v.decode(&ids), "a man rides the dog");
        let json = serde_json::to_string(&v).unwrap();
        let mut back: Vocabulary = serde_json::from_str(&json).unwrap();
        back.reindex();
        assert_eq!(back.id("horse"), v.id("horse"));
        assert!(Vocabulary::from_tokens(vec!["a".into()]).is_err());
    }

    #[test]
    fn caption_loss_examples() {
        assert!(caption_loss(&[vec![0.0, 1.0, 0.0]], &[1]).unwrap() <= 1e-9);
        let uniform = vec![vec![0.1; 10]; 3];
        assert!((caption_loss(&uniform, &[4, 5, 6]).unwrap() - 10f64.ln()).abs() < 1e-12);
        assert!(caption_loss(&uniform, &[0, 0, 0]).is_err());
        let p = vec![
            vec![0.2, 0.3, 0.5],
            vec![0.6, 0.1, 0.3],
            vec![0.9, 0.05, 0.05],
        ];
        let oracle = -(0.5f64.ln() + 0.1f64.ln()) / 2.0;
        assert!((caption_loss(&p, &[2, 1, 0]).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn dvc_total_loss_examples() {
        let w = LossWeights::new(1.0, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(dvc_total_loss(1.25, 9.0, 9.0, 9.0, &w).unwrap(), 1.25);
        assert_eq!(
            dvc_total_loss(1.0, 2.0, 3.0, 4.0, &LossWeights::default()).unwrap(),
            10.0
        );
        let err = dvc_total_loss(1.0, f64::NAN, 3.0, 4.0, &LossWeights::default()).unwrap_err();
        assert!(err.to_string().contains("L_cs"));
        assert!(LossWeights::new(0.0, 0.0, 0.0, 0.0).is_err());
        assert!(LossWeights::new(-1.0, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn encoder_shape_and_zero_depth() {
        let (store, cap, inputs) = tiny(1, 0);
        let mut g = Graph::new(&store);
        let batches = single_batches(&mut g, &inputs);
        let out = cap.streams[0].encoder.forward(&mut g, &batches[0]).unwrap();
        assert_eq!(g.shape(out), (3, 4));
        let StreamInput::Features(f) = &inputs[0] else {
            unreachable!()
        };
        let InputMap::Projection(lin) = &cap.streams[0].encoder.input else {
            unreachable!()
        };
        let mut expected = f.matmul(store.get(lin.w));
        for r in 0..3 {
            let pe = sinusoid(r as f64, 4);
            for c in 0..4 {
                expected.set(
                    r,
                    c,
                    expected.get(r, c) + store.get(lin.b.unwrap()).get(0, c) + pe[c],
                );
            }
        }
        for (a, b) in g.value(out).data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn encoder_block_has_no_cross_position_mixing() {
        let (store, cap, inputs) = tiny(2, 1);
        let StreamInput::Features(f) = &inputs[0] else {
            unreachable!()
        };
        let block_out = |feats: &Tensor| {
            let mut g = Graph::new(&store);
            let b = StreamBatch::features(&mut g, &[feats]);
            let enc = &cap.streams[0].encoder;
            let x = enc.embed(&mut g, &b).unwrap();
            let y = enc.blocks[0].ffn.forward(&mut g, x);
            g.value(y).clone()
        };
        let base = block_out(f);
        let mut bumped = f.clone();
        bumped.set(1, 0, bumped.get(1, 0) + 0.5);
        let after = block_out(&bumped);
        for r in 0..3 {
            let changed = base.row(r).iter().zip(after.row(r)).any(|(a, b)| a != b);
            assert_eq!(changed, r == 1, "row {r}");
        }
    }

    #[test]
    fn decode_step_is_a_distribution() {
        let (store, cap, inputs) = tiny(3, 1);
        let p = cap
            .decode_step(&store, &inputs, &[Vocabulary::START, 5])
            .unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(p.iter().all(|&x| x >= 0.0));
        assert!(cap.decode_step(&store, &inputs, &[]).is_err());
    }

    #[test]
    fn future_tokens_do_not_affect_earlier_steps() {
        let (store, cap, inputs) = tiny(4, 1);
        let run = |prefix: Vec<usize>| {
            let mut g = Graph::new(&store);
            let batches = single_batches(&mut g, &inputs);
            let mem = cap.encode(&mut g, &batches).unwrap();
            let lengths: Vec<Vec<usize>> = batches.iter().map(|b| b.lengths.clone()).collect();
            let lp = cap.decode(&mut g, &mem, &lengths, &[prefix]).unwrap();
            g.value(lp).row(1).to_vec()
        };
        assert_eq!(run(vec![1, 5, 6, 7]), run(vec![1, 5, 0, 0]));
    }

    #[test]
    fn batched_decode_matches_single_items() {
        let (store, cap, inputs) = tiny(5, 1);
        let StreamInput::Features(f) = &inputs[0] else {
            unreachable!()
        };
        let f2 = f.slice_rows(0, 2);
        let targets = vec![vec![5, 6, 2], vec![7, 2]];
        let mut g = Graph::new(&store);
        let batches = vec![
            StreamBatch::features(&mut g, &[f, &f2]),
            StreamBatch::tokens(&[&[4, 5, 6], &[8]]),
        ];
        let (batched, n) = cap.teacher_forced_nll(&mut g, &batches, &targets).unwrap();
        assert_eq!(n, 5);
        let mut single = 0.0;
        for (feat, toks, t) in [
            (f.clone(), vec![4, 5, 6], &targets[0]),
            (f2.clone(), vec![8], &targets[1]),
        ] {
            let mut g = Graph::new(&store);
            let b = vec![
                StreamBatch::features(&mut g, &[&feat]),
                StreamBatch::tokens(&[&toks]),
            ];
            let (v, _) = cap
                .teacher_forced_nll(&mut g, &b, std::slice::from_ref(t))
                .unwrap();
            single += g.scalar(v);
        }
        assert!((g.scalar(batched) - single).abs() < 1e-10);
    }

    #[test]
    fn caption_loss_gradient_check() {
        let (store, cap, inputs) = tiny(6, 1);
        let report = check_gradients(&store, 1e-5, None, |g| {
            let batches = single_batches(g, &inputs);
            cap.caption_loss_graph(g, &batches, &[vec![5, 6, 2]])
                .unwrap()
        });
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn generation_terminates_and_is_deterministic() {
        let (store, cap, inputs) = tiny(7, 1);
        let v = vocab();
        let a = cap.generate(&store, &inputs, &v, 5).unwrap();
        let b = cap.generate(&store, &inputs, &v, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.token_ids.len() <= 5);
        assert!(!a.token_ids.contains(&Vocabulary::PAD));
        assert!(a.token_ids.last() == Some(&Vocabulary::END) || a.token_ids.len() == 5);
    }

    #[test]
    fn caption_file_shape() {
        let mut f = CaptionFile::new();
        f.insert(
            "v1".into(),
            VideoCaptions {
                timestamps: vec![[0.0, 2.5]],
                sentences: vec!["a dog".into()],
                ..Default::default()
            },
        );
        let json = serde_json::to_value(&f).unwrap();
        assert_eq!(
            json,
            serde_json::json!({"v1": {"timestamps": [[0.0, 2.5]], "sentences": ["a dog"]}})
        );
    }

    #[test]
    fn track_validation_and_crop() {
        let t =
            ModalityTrack::new(Modality::Audio, Tensor::zeros(3, 2), vec![0.0, 1.0, 2.0]).unwrap();
        assert!(t.validate(2, 2.0).is_ok());
        assert!(t.validate(3, 2.0).is_err());
        assert!(t.validate(2, 1.5).is_err());
        assert_eq!(t.crop(0.5, 2.0).unwrap().timestamps, vec![1.0, 2.0]);
        assert!(t.crop(5.0, 6.0).is_none());
        assert!(ModalityTrack::new(Modality::Audio, Tensor::zeros(2, 2), vec![1.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn weighted_total_is_dot_product(c in proptest::array::uniform4(0.0f64..10.0), w in proptest::array::uniform4(0.1f64..3.0)) {
            let weights = LossWeights::new(w[0], w[1], w[2], w[3]).unwrap();
            let got = dvc_total_loss(c[0], c[1], c[2], c[3], &weights).unwrap();
            let oracle: f64 = (0..4).map(|i| c[i] * w[i]).sum();
            prop_assert!((got - oracle).abs() < 1e-12);
        }
    }
}
