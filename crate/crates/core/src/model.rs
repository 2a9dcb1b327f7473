//! The relation extraction model: entity-marker insertion, a small
//! trainable transformer encoder, marker-state aggregation, and an
//! extensible linear softmax head.
//!
//! The instance representation is
//! `h = LayerNorm(W_cat . [h_e11 ; h_e21] + b_cat)` where `h_e11`/`h_e21`
//! are the encoder states at the head-start and tail-start marker
//! positions, so `h` has width `2 * d_model`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::Instance;
use crate::data::RelationId;
use crate::error::{CoreError, Result};
use crate::mathx;
use crate::optim::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Total embedding rows including the four trailing marker tokens.
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    /// Feed-forward width as a multiple of `d_model`.
    pub ff_mult: usize,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 204,
            d_model: 32,
            n_blocks: 1,
            n_heads: 2,
            ff_mult: 2,
            max_len: 64,
        }
    }
}

impl EncoderConfig {
    /// Configuration sized for a corpus token space, with the four marker
    /// tokens appended to the vocabulary.
    pub fn for_token_vocab(token_vocab: usize) -> Self {
        EncoderConfig {
            vocab_size: token_vocab + 4,
            ..EncoderConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model < 2 || self.d_model % 2 != 0 || self.d_model % self.n_heads.max(1) != 0 {
            return Err(CoreError::Config(format!(
                "d_model {} must be even and divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.n_heads == 0 || self.vocab_size < 5 || self.max_len < 6 || self.ff_mult == 0 {
            return Err(CoreError::Config("encoder config out of range".into()));
        }
        Ok(())
    }

    pub fn markers(&self) -> MarkerTokens {
        let v = self.vocab_size as u32;
        MarkerTokens {
            head_start: v - 4,
            head_end: v - 3,
            tail_start: v - 2,
            tail_end: v - 1,
        }
    }

    /// Width of the aggregated representation `h`.
    pub fn hidden_width(&self) -> usize {
        2 * self.d_model
    }

    pub fn ff_width(&self) -> usize {
        self.ff_mult * self.d_model
    }
}

/// Ids of the four special marker tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MarkerTokens {
    pub head_start: u32,
    pub head_end: u32,
    pub tail_start: u32,
    pub tail_end: u32,
}

/// A token sequence with the four markers inserted and the positions of the
/// head-start and tail-start markers recorded.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkedSequence {
    pub tokens: Vec<u32>,
    pub head_start_pos: usize,
    pub tail_start_pos: usize,
}

/// Insert `[E11] head [E12]` and `[E21] tail [E22]` around the entity spans.
/// Markers are tagged by role: the head markers wrap the head span even when
/// the head follows the tail in surface order.
pub fn insert_entity_markers(inst: &Instance, markers: MarkerTokens) -> Result<MarkedSequence> {
    inst.validate()?;
    let mut tokens = Vec::with_capacity(inst.tokens.len() + 4);
    let mut head_start_pos = 0;
    let mut tail_start_pos = 0;
    for (pos, &tok) in inst.tokens.iter().enumerate() {
        if pos == inst.head.start {
            head_start_pos = tokens.len();
            tokens.push(markers.head_start);
        }
        if pos == inst.tail.start {
            tail_start_pos = tokens.len();
            tokens.push(markers.tail_start);
        }
        tokens.push(tok);
        if pos == inst.head.end {
            tokens.push(markers.head_end);
        }
        if pos == inst.tail.end {
            tokens.push(markers.tail_end);
        }
    }
    Ok(MarkedSequence {
        tokens,
        head_start_pos,
        tail_start_pos,
    })
}

struct BlockParams {
    w_q: ParamId,
    b_q: ParamId,
    w_k: ParamId,
    b_k: ParamId,
    w_v: ParamId,
    b_v: ParamId,
    w_o: ParamId,
    b_o: ParamId,
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    w_f1: ParamId,
    b_f1: ParamId,
    w_f2: ParamId,
    b_f2: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
}

/// Encoder parameter handles plus the fixed sinusoidal position table.
pub struct EncoderParams {
    pub config: EncoderConfig,
    embed: ParamId,
    blocks: Vec<BlockParams>,
    w_cat: ParamId,
    b_cat: ParamId,
    cat_gain: ParamId,
    cat_bias: ParamId,
    pos_table: Tensor,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn sinusoidal_positions(max_len: usize, d: usize) -> Tensor {
    let mut vals = vec![0.0; max_len * d];
    for pos in 0..max_len {
        for i in 0..d / 2 {
            let freq = 1.0 / mathx::powf(10_000.0, 2.0 * i as f64 / d as f64);
            vals[pos * d + 2 * i] = mathx::sin(pos as f64 * freq);
            vals[pos * d + 2 * i + 1] = mathx::cos(pos as f64 * freq);
        }
    }
    Tensor::from_values(&[max_len, d], vals).expect("table shape")
}

fn gaussian(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let vals: Vec<f64> = (0..n).map(|_| rng.normal(0.0, std)).collect();
    Tensor::from_values(shape, vals).expect("init shape")
}

impl EncoderParams {
    /// Register freshly initialized encoder parameters in `store`.
    ///
    /// `embed_lr_scale` applies to the embedding table, `lr_scale` to the
    /// transformer blocks and the aggregation layer. Token embeddings are
    /// per-token state that new relations must acquire quickly, while the
    /// block weights are a shared mechanism every task trains the same way
    /// and are kept slow-moving.
    pub fn init(
        config: EncoderConfig,
        store: &mut ParamStore,
        rng: &mut Rng,
        embed_lr_scale: f64,
        lr_scale: f64,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let attn_std = 1.0 / mathx::sqrt(d as f64);
        let embed = store.register_scaled(
            "embed",
            gaussian(rng, &[config.vocab_size, d], 0.5),
            embed_lr_scale,
        );
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for b in 0..config.n_blocks {
            let ff = config.ff_width();
            let name = |part: &str| format!("block{b}.{part}");
            blocks.push(BlockParams {
                w_q: store.register_scaled(&name("w_q"), gaussian(rng, &[d, d], attn_std), lr_scale),
                b_q: store.register_scaled(&name("b_q"), Tensor::zeros(&[d]), lr_scale),
                w_k: store.register_scaled(&name("w_k"), gaussian(rng, &[d, d], attn_std), lr_scale),
                b_k: store.register_scaled(&name("b_k"), Tensor::zeros(&[d]), lr_scale),
                w_v: store.register_scaled(&name("w_v"), gaussian(rng, &[d, d], attn_std), lr_scale),
                b_v: store.register_scaled(&name("b_v"), Tensor::zeros(&[d]), lr_scale),
                w_o: store.register_scaled(&name("w_o"), gaussian(rng, &[d, d], attn_std), lr_scale),
                b_o: store.register_scaled(&name("b_o"), Tensor::zeros(&[d]), lr_scale),
                ln1_gain: store.register_scaled(&name("ln1.gain"), Tensor::from_values(&[d], vec![1.0; d])?, lr_scale),
                ln1_bias: store.register_scaled(&name("ln1.bias"), Tensor::zeros(&[d]), lr_scale),
                w_f1: store.register_scaled(&name("w_f1"), gaussian(rng, &[d, ff], attn_std), lr_scale),
                b_f1: store.register_scaled(&name("b_f1"), Tensor::zeros(&[ff]), lr_scale),
                w_f2: store.register_scaled(&name("w_f2"), gaussian(rng, &[ff, d], 1.0 / mathx::sqrt(ff as f64)), lr_scale),
                b_f2: store.register_scaled(&name("b_f2"), Tensor::zeros(&[d]), lr_scale),
                ln2_gain: store.register_scaled(&name("ln2.gain"), Tensor::from_values(&[d], vec![1.0; d])?, lr_scale),
                ln2_bias: store.register_scaled(&name("ln2.bias"), Tensor::zeros(&[d]), lr_scale),
            });
        }
        let hidden = config.hidden_width();
        let w_cat = store.register_scaled(
            "agg.w_cat",
            gaussian(rng, &[hidden, hidden], 1.0 / mathx::sqrt(hidden as f64)),
            lr_scale,
        );
        let b_cat = store.register_scaled("agg.b_cat", Tensor::zeros(&[hidden]), lr_scale);
        let cat_gain = store.register_scaled(
            "agg.ln.gain",
            Tensor::from_values(&[hidden], vec![1.0; hidden])?,
            lr_scale,
        );
        let cat_bias = store.register_scaled("agg.ln.bias", Tensor::zeros(&[hidden]), lr_scale);
        let pos_table = sinusoidal_positions(config.max_len, d);
        Ok(EncoderParams {
            config,
            embed,
            blocks,
            w_cat,
            b_cat,
            cat_gain,
            cat_bias,
            pos_table,
        })
    }

    /// Parameter names in registration order (embedding, blocks, aggregation).
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.embed];
        for b in &self.blocks {
            ids.extend([
                b.w_q, b.b_q, b.w_k, b.b_k, b.w_v, b.b_v, b.w_o, b.b_o, b.ln1_gain, b.ln1_bias,
                b.w_f1, b.b_f1, b.w_f2, b.b_f2, b.ln2_gain, b.ln2_bias,
            ]);
        }
        ids.extend([self.w_cat, self.b_cat, self.cat_gain, self.cat_bias]);
        ids
    }

    pub fn embed_id(&self) -> ParamId {
        self.embed
    }
}

/// A batch forward pass: the tape plus the node of the `B x 2d` hidden
/// representations.
pub struct EncodedBatch {
    pub tape: Tape,
    pub h: NodeId,
}

/// Run the encoder over a batch of marked sequences. Sequences are batched
/// ragged: every token row of the batch lives in one matrix and attention
/// stays within each instance's span.
pub fn encode_batch(
    store: &ParamStore,
    enc: &EncoderParams,
    seqs: &[&MarkedSequence],
) -> Result<EncodedBatch> {
    if seqs.is_empty() {
        return Err(CoreError::EmptyData("encode_batch of zero sequences".into()));
    }
    let cfg = &enc.config;
    let mut ids: Vec<u32> = Vec::new();
    let mut positions: Vec<u32> = Vec::new();
    let mut spans: Vec<(usize, usize)> = Vec::new();
    let mut pairs: Vec<(u32, u32)> = Vec::new();
    for seq in seqs {
        let len = seq.tokens.len();
        if len > cfg.max_len {
            return Err(CoreError::SequenceTooLong {
                len,
                max: cfg.max_len,
            });
        }
        let start = ids.len();
        spans.push((start, len));
        pairs.push((
            (start + seq.head_start_pos) as u32,
            (start + seq.tail_start_pos) as u32,
        ));
        ids.extend(seq.tokens.iter().copied());
        positions.extend(0..len as u32);
    }

    let mut tape = Tape::new();
    let table = tape.param(store, enc.embed);
    let pos_leaf = tape.leaf(enc.pos_table.clone());
    let emb = tape.gather_rows(table, ids)?;
    let pe = tape.gather_rows(pos_leaf, positions)?;
    let mut x = tape.add(emb, pe)?;
    for blk in &enc.blocks {
        let w_q = tape.param(store, blk.w_q);
        let b_q = tape.param(store, blk.b_q);
        let w_k = tape.param(store, blk.w_k);
        let b_k = tape.param(store, blk.b_k);
        let w_v = tape.param(store, blk.w_v);
        let b_v = tape.param(store, blk.b_v);
        let q = tape.matmul(x, w_q)?;
        let q = tape.add_row_broadcast(q, b_q)?;
        let k = tape.matmul(x, w_k)?;
        let k = tape.add_row_broadcast(k, b_k)?;
        let v = tape.matmul(x, w_v)?;
        let v = tape.add_row_broadcast(v, b_v)?;
        let att = tape.attention(q, k, v, cfg.n_heads, spans.clone())?;
        let w_o = tape.param(store, blk.w_o);
        let b_o = tape.param(store, blk.b_o);
        let proj = tape.matmul(att, w_o)?;
        let proj = tape.add_row_broadcast(proj, b_o)?;
        let res1 = tape.add(x, proj)?;
        let g1 = tape.param(store, blk.ln1_gain);
        let bb1 = tape.param(store, blk.ln1_bias);
        let x1 = tape.layer_norm_rows(res1, g1, bb1, LAYER_NORM_EPS)?;
        let w_f1 = tape.param(store, blk.w_f1);
        let b_f1 = tape.param(store, blk.b_f1);
        let w_f2 = tape.param(store, blk.w_f2);
        let b_f2 = tape.param(store, blk.b_f2);
        let f = tape.matmul(x1, w_f1)?;
        let f = tape.add_row_broadcast(f, b_f1)?;
        let f = tape.gelu(f)?;
        let f = tape.matmul(f, w_f2)?;
        let f = tape.add_row_broadcast(f, b_f2)?;
        let res2 = tape.add(x1, f)?;
        let g2 = tape.param(store, blk.ln2_gain);
        let bb2 = tape.param(store, blk.ln2_bias);
        x = tape.layer_norm_rows(res2, g2, bb2, LAYER_NORM_EPS)?;
    }
    let marker_states = tape.concat_pairs(x, pairs)?;
    let w_cat = tape.param(store, enc.w_cat);
    let b_cat = tape.param(store, enc.b_cat);
    let agg = tape.matmul(marker_states, w_cat)?;
    let agg = tape.add_row_broadcast(agg, b_cat)?;
    let gain = tape.param(store, enc.cat_gain);
    let bias = tape.param(store, enc.cat_bias);
    let h = tape.layer_norm_rows(agg, gain, bias, LAYER_NORM_EPS)?;
    Ok(EncodedBatch { tape, h })
}

/// Forward-only hidden vectors for many sequences, in input order.
pub fn encode_many(
    store: &ParamStore,
    enc: &EncoderParams,
    seqs: &[MarkedSequence],
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(64) {
        let refs: Vec<&MarkedSequence> = chunk.iter().collect();
        let batch = encode_batch(store, enc, &refs)?;
        let h = batch.tape.value(batch.h);
        let (rows, _) = h.dims2();
        for r in 0..rows {
            out.push(h.row(r).to_vec());
        }
    }
    Ok(out)
}

/// Hidden vector of one sequence.
pub fn encode(store: &ParamStore, enc: &EncoderParams, seq: &MarkedSequence) -> Result<Vec<f64>> {
    let batch = encode_batch(store, enc, &[seq])?;
    Ok(batch.tape.value(batch.h).row(0).to_vec())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassEntry {
    pub relation: RelationId,
    pub first_task: usize,
}

/// Extensible linear softmax head. The weight matrix holds one row per
/// class; new classes arrive as zero rows so existing logits are preserved
/// bit for bit.
pub struct ClassifierHead {
    weight: ParamId,
    classes: Vec<ClassEntry>,
    index_of: BTreeMap<RelationId, usize>,
    hidden: usize,
}

impl ClassifierHead {
    pub fn new(store: &mut ParamStore, hidden: usize, lr_scale: f64) -> Self {
        let weight = store.register_scaled("head.w", Tensor::zeros(&[0, hidden]), lr_scale);
        ClassifierHead {
            weight,
            classes: Vec::new(),
            index_of: BTreeMap::new(),
            hidden,
        }
    }

    pub fn weight_id(&self) -> ParamId {
        self.weight
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[ClassEntry] {
        &self.classes
    }

    pub fn class_of(&self, relation: RelationId) -> Option<usize> {
        self.index_of.get(&relation).copied()
    }

    pub fn entry(&self, class: usize) -> ClassEntry {
        self.classes[class]
    }

    /// Append zero-initialized rows for relations first seen at `task`.
    pub fn extend(
        &mut self,
        store: &mut ParamStore,
        new_relations: &[RelationId],
        task: usize,
    ) -> Result<()> {
        for &r in new_relations {
            if self.index_of.contains_key(&r) {
                return Err(CoreError::DuplicateRelation(format!("relation id {}", r.0)));
            }
        }
        if new_relations.is_empty() {
            return Ok(());
        }
        store.extend_rows(self.weight, new_relations.len())?;
        for &r in new_relations {
            self.index_of.insert(r, self.classes.len());
            self.classes.push(ClassEntry {
                relation: r,
                first_task: task,
            });
        }
        Ok(())
    }

    /// Tape node of the batch logits: `h . W^T`.
    pub fn logits_node(&self, tape: &mut Tape, store: &ParamStore, h: NodeId) -> Result<NodeId> {
        let w = tape.param(store, self.weight);
        tape.matmul_bt(h, w)
    }

    /// Raw class scores for one hidden vector.
    pub fn logits(&self, store: &ParamStore, h: &[f64]) -> Result<Vec<f64>> {
        let w = store.value(self.weight);
        if h.len() != self.hidden {
            return Err(CoreError::ShapeMismatch {
                op: "classifier",
                left: vec![h.len()],
                right: vec![self.hidden],
            });
        }
        let mut out = Vec::with_capacity(self.classes.len());
        for c in 0..self.classes.len() {
            let row = w.row(c);
            let mut s = 0.0;
            for (&a, &b) in row.iter().zip(h.iter()) {
                s += a * b;
            }
            out.push(s);
        }
        Ok(out)
    }

    /// Softmax class probabilities for one hidden vector.
    pub fn predict_proba(&self, store: &ParamStore, h: &[f64]) -> Result<Vec<f64>> {
        let mut scores = self.logits(store, h)?;
        crate::tensor::softmax_row(&mut scores);
        Ok(scores)
    }

    /// Argmax class with ties broken toward the lowest class index. Operates
    /// on logits, which order identically to the softmax probabilities.
    pub fn predict_class(&self, store: &ParamStore, h: &[f64]) -> Result<usize> {
        let scores = self.logits(store, h)?;
        Ok(argmax_lowest(&scores))
    }
}

pub fn argmax_lowest(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Predicted relation for one marked sequence.
pub fn predict(
    store: &ParamStore,
    enc: &EncoderParams,
    head: &ClassifierHead,
    seq: &MarkedSequence,
) -> Result<RelationId> {
    let h = encode(store, enc, seq)?;
    let class = head.predict_class(store, &h)?;
    Ok(head.entry(class).relation)
}

/// Names every model parameter in a stable order, for checkpoints.
pub fn named_param_ids(enc: &EncoderParams, head: &ClassifierHead) -> Vec<ParamId> {
    let mut ids = enc.param_ids();
    ids.push(head.weight_id());
    ids
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Span;

    fn inst(tokens: Vec<u32>, head: (usize, usize), tail: (usize, usize)) -> Instance {
        Instance {
            tokens,
            head: Span::new(head.0, head.1),
            tail: Span::new(tail.0, tail.1),
            relation: RelationId(0),
        }
    }

    fn markers() -> MarkerTokens {
        EncoderConfig {
            vocab_size: 10,
            ..EncoderConfig::default()
        }
        .markers()
    }

    #[test]
    fn marker_insertion_direct_case() {
        // tokens [a,b,c,d], head=(0,0), tail=(2,3)
        let m = markers();
        let seq = insert_entity_markers(&inst(vec![0, 1, 2, 3], (0, 0), (2, 3)), m).unwrap();
        assert_eq!(
            seq.tokens,
            vec![m.head_start, 0, m.head_end, 1, m.tail_start, 2, 3, m.tail_end]
        );
        assert_eq!((seq.head_start_pos, seq.tail_start_pos), (0, 4));
    }

    #[test]
    fn markers_tag_by_role_when_head_follows_tail() {
        let m = markers();
        let seq = insert_entity_markers(&inst(vec![0, 1, 2, 3], (2, 3), (0, 0)), m).unwrap();
        assert_eq!(
            seq.tokens,
            vec![m.tail_start, 0, m.tail_end, 1, m.head_start, 2, 3, m.head_end]
        );
        assert_eq!((seq.head_start_pos, seq.tail_start_pos), (4, 0));
        assert_eq!(seq.tokens[seq.head_start_pos], m.head_start);
        assert_eq!(seq.tokens[seq.tail_start_pos], m.tail_start);
    }

    #[test]
    fn empty_span_is_a_span_error() {
        let bad = Instance {
            tokens: vec![0, 1, 2, 3],
            head: Span::new(2, 1),
            tail: Span::new(3, 3),
            relation: RelationId(0),
        };
        assert!(matches!(
            insert_entity_markers(&bad, markers()),
            Err(CoreError::Span(_))
        ));
    }

    #[test]
    fn overlapping_spans_are_a_span_error() {
        let bad = inst(vec![0, 1, 2, 3], (0, 2), (2, 3));
        assert!(matches!(
            insert_entity_markers(&bad, markers()),
            Err(CoreError::Span(_))
        ));
    }

    fn small_model(seed: u64) -> (ParamStore, EncoderParams, ClassifierHead) {
        let cfg = EncoderConfig {
            vocab_size: 20,
            d_model: 8,
            n_blocks: 1,
            n_heads: 2,
            ff_mult: 2,
            max_len: 16,
        };
        let mut store = ParamStore::new();
        let mut rng = Rng::from_seed(seed);
        let enc = EncoderParams::init(cfg, &mut store, &mut rng, 1.0, 1.0).unwrap();
        let head = ClassifierHead::new(&mut store, enc.config.hidden_width(), 1.0);
        (store, enc, head)
    }

    fn marked(cfg: &EncoderConfig, tokens: Vec<u32>) -> MarkedSequence {
        let i = inst(tokens, (0, 0), (2, 2));
        insert_entity_markers(&i, cfg.markers()).unwrap()
    }

    #[test]
    fn encode_is_deterministic_and_matches_single_path() {
        let (store, enc, _) = small_model(9);
        let a = marked(&enc.config, vec![1, 2, 3, 4, 5]);
        let b = marked(&enc.config, vec![5, 4, 3, 2, 1]);
        let batch = encode_batch(&store, &enc, &[&a, &b]).unwrap();
        let h_batch = batch.tape.value(batch.h);
        let ha = encode(&store, &enc, &a).unwrap();
        let ha2 = encode(&store, &enc, &a).unwrap();
        assert_eq!(ha, ha2);
        assert_eq!(h_batch.row(0), &ha[..]);
        let many = encode_many(&store, &enc, &[a, b]).unwrap();
        assert_eq!(many[0], ha);
        assert_eq!(many[1], h_batch.row(1));
    }

    #[test]
    fn encode_rejects_overlong_sequences() {
        let (store, enc, _) = small_model(1);
        let long = MarkedSequence {
            tokens: vec![0; enc.config.max_len + 1],
            head_start_pos: 0,
            tail_start_pos: 1,
        };
        assert!(matches!(
            encode_batch(&store, &enc, &[&long]),
            Err(CoreError::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn zero_depth_encoder_uses_only_marker_rows() {
        let cfg = EncoderConfig {
            vocab_size: 20,
            d_model: 8,
            n_blocks: 0,
            n_heads: 2,
            ff_mult: 2,
            max_len: 16,
        };
        let mut store = ParamStore::new();
        let mut rng = Rng::from_seed(4);
        let enc = EncoderParams::init(cfg, &mut store, &mut rng, 1.0, 1.0).unwrap();
        // same spans and marker positions, permuted non-marker tokens
        let a = marked(&enc.config, vec![1, 2, 3, 4, 5]);
        let b = marked(&enc.config, vec![1, 5, 3, 2, 4]);
        assert_eq!(a.head_start_pos, b.head_start_pos);
        let ha = encode(&store, &enc, &a).unwrap();
        let hb = encode(&store, &enc, &b).unwrap();
        assert_eq!(ha, hb);
    }

    #[test]
    fn zero_depth_zero_wcat_yields_layer_norm_of_bias() {
        let cfg = EncoderConfig {
            vocab_size: 12,
            d_model: 4,
            n_blocks: 0,
            n_heads: 2,
            ff_mult: 2,
            max_len: 16,
        };
        let mut store = ParamStore::new();
        let mut rng = Rng::from_seed(4);
        let enc = EncoderParams::init(cfg.clone(), &mut store, &mut rng, 1.0, 1.0).unwrap();
        let hidden = cfg.hidden_width();
        // W_cat = 0, b_cat = v, gain = 1, bias = 0
        let v: Vec<f64> = (0..hidden).map(|i| i as f64 - 3.0).collect();
        *store.value_mut(enc.w_cat) = Tensor::zeros(&[hidden, hidden]);
        *store.value_mut(enc.b_cat) = Tensor::from_values(&[hidden], v.clone()).unwrap();
        let seq = marked(&cfg, vec![1, 2, 3, 4, 5]);
        let h = encode(&store, &enc, &seq).unwrap();
        // expected: plain layer norm of v
        let mean = v.iter().sum::<f64>() / hidden as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / hidden as f64;
        let expect: Vec<f64> = v
            .iter()
            .map(|x| (x - mean) / (var + LAYER_NORM_EPS).sqrt())
            .collect();
        for (got, want) in h.iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn predict_proba_uniform_for_zero_weights_and_single_class() {
        let (mut store, enc, mut head) = small_model(2);
        head.extend(&mut store, &[RelationId(0)], 0).unwrap();
        let seq = marked(&enc.config, vec![1, 2, 3, 4]);
        let h = encode(&store, &enc, &seq).unwrap();
        let p = head.predict_proba(&store, &h).unwrap();
        assert_eq!(p, vec![1.0]);

        head.extend(&mut store, &[RelationId(1), RelationId(2), RelationId(3)], 1)
            .unwrap();
        let p = head.predict_proba(&store, &h).unwrap();
        assert_eq!(p.len(), 4);
        for &x in &p {
            assert!((x - 0.25).abs() < 1e-12);
        }
        // zero weights: argmax tie resolves to class 0
        assert_eq!(head.predict_class(&store, &h).unwrap(), 0);
    }

    #[test]
    fn predict_proba_matches_independent_softmax() {
        let (mut store, enc, mut head) = small_model(3);
        let rels: Vec<RelationId> = (0..5).map(RelationId).collect();
        head.extend(&mut store, &rels, 0).unwrap();
        // give the head nonzero weights
        let hidden = enc.config.hidden_width();
        let mut rng = Rng::from_seed(77);
        *store.value_mut(head.weight_id()) = Tensor::from_values(
            &[5, hidden],
            (0..5 * hidden).map(|_| rng.normal(0.0, 1.0)).collect(),
        )
        .unwrap();
        let seq = marked(&enc.config, vec![1, 2, 3, 4, 5, 6]);
        let h = encode(&store, &enc, &seq).unwrap();
        let p = head.predict_proba(&store, &h).unwrap();
        // independent exp/normalize computation
        let logits = head.logits(&store, &h).unwrap();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (got, want) in p.iter().zip(exps.iter().map(|e| e / z)) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn predict_proba_rejects_wrong_width() {
        let (mut store, _, mut head) = small_model(5);
        head.extend(&mut store, &[RelationId(0)], 0).unwrap();
        assert!(matches!(
            head.predict_proba(&store, &[1.0, 2.0]),
            Err(CoreError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn extend_head_preserves_old_logits_bitwise() {
        let (mut store, enc, mut head) = small_model(6);
        head.extend(&mut store, &[RelationId(0), RelationId(1), RelationId(2)], 0)
            .unwrap();
        let hidden = enc.config.hidden_width();
        let mut rng = Rng::from_seed(10);
        *store.value_mut(head.weight_id()) = Tensor::from_values(
            &[3, hidden],
            (0..3 * hidden).map(|_| rng.normal(0.0, 1.0)).collect(),
        )
        .unwrap();
        let seq = marked(&enc.config, vec![9, 8, 7, 6, 5]);
        let h = encode(&store, &enc, &seq).unwrap();
        let before = head.logits(&store, &h).unwrap();
        head.extend(&mut store, &[RelationId(7), RelationId(9)], 1).unwrap();
        let after = head.logits(&store, &h).unwrap();
        assert_eq!(head.class_count(), 5);
        assert_eq!(&after[..3], &before[..]);
        assert_eq!(&after[3..], &[0.0, 0.0]);
    }

    #[test]
    fn extend_head_with_no_relations_is_identity() {
        let (mut store, _, mut head) = small_model(6);
        head.extend(&mut store, &[RelationId(0)], 0).unwrap();
        let before = store.value(head.weight_id()).clone();
        head.extend(&mut store, &[], 1).unwrap();
        assert_eq!(store.value(head.weight_id()), &before);
        assert_eq!(head.class_count(), 1);
    }

    #[test]
    fn extend_head_rejects_duplicates() {
        let (mut store, _, mut head) = small_model(6);
        head.extend(&mut store, &[RelationId(0)], 0).unwrap();
        assert!(matches!(
            head.extend(&mut store, &[RelationId(0)], 1),
            Err(CoreError::DuplicateRelation(_))
        ));
    }

    #[test]
    fn extension_preserves_argmax_over_old_classes() {
        let (mut store, enc, mut head) = small_model(8);
        let rels: Vec<RelationId> = (0..4).map(RelationId).collect();
        head.extend(&mut store, &rels, 0).unwrap();
        let hidden = enc.config.hidden_width();
        let mut rng = Rng::from_seed(20);
        *store.value_mut(head.weight_id()) = Tensor::from_values(
            &[4, hidden],
            (0..4 * hidden).map(|_| rng.normal(0.0, 1.0)).collect(),
        )
        .unwrap();
        let seqs: Vec<MarkedSequence> = (0..20)
            .map(|i| marked(&enc.config, vec![i % 12, (i + 3) % 12, (i + 5) % 12, 2, 1]))
            .collect();
        let before: Vec<usize> = seqs
            .iter()
            .map(|s| {
                let h = encode(&store, &enc, s).unwrap();
                head.predict_class(&store, &h).unwrap()
            })
            .collect();
        head.extend(&mut store, &[RelationId(10), RelationId(11)], 1).unwrap();
        for (s, &want) in seqs.iter().zip(&before) {
            let h = encode(&store, &enc, s).unwrap();
            let after_scores = head.logits(&store, &h).unwrap();
            let old_best = argmax_lowest(&after_scores[..4]);
            assert_eq!(old_best, want);
        }
    }

    #[test]
    fn predict_agrees_with_probability_recomputation() {
        let (mut store, enc, mut head) = small_model(12);
        let rels: Vec<RelationId> = (0..5).map(RelationId).collect();
        head.extend(&mut store, &rels, 0).unwrap();
        let hidden = enc.config.hidden_width();
        let mut rng = Rng::from_seed(30);
        *store.value_mut(head.weight_id()) = Tensor::from_values(
            &[5, hidden],
            (0..5 * hidden).map(|_| rng.normal(0.0, 1.0)).collect(),
        )
        .unwrap();
        for i in 0..50u32 {
            let seq = marked(
                &enc.config,
                vec![i % 12, (i * 7 + 1) % 12, (i * 3 + 2) % 12, (i + 4) % 12],
            );
            let got = predict(&store, &enc, &head, &seq).unwrap();
            let h = encode(&store, &enc, &seq).unwrap();
            let p = head.predict_proba(&store, &h).unwrap();
            let mut best = 0;
            for (c, &prob) in p.iter().enumerate().skip(1) {
                if prob > p[best] {
                    best = c;
                }
            }
            assert_eq!(got, head.entry(best).relation);
        }
    }

    #[test]
    fn one_hot_favoring_row_wins_prediction() {
        let (mut store, enc, mut head) = small_model(13);
        head.extend(&mut store, &[RelationId(0), RelationId(1)], 0).unwrap();
        let seq = marked(&enc.config, vec![1, 2, 3]);
        let h = encode(&store, &enc, &seq).unwrap();
        // make class 1's row point along h
        let hidden = enc.config.hidden_width();
        let mut w = vec![0.0; 2 * hidden];
        w[hidden..].copy_from_slice(&h);
        *store.value_mut(head.weight_id()) = Tensor::from_values(&[2, hidden], w).unwrap();
        assert_eq!(predict(&store, &enc, &head, &seq).unwrap(), RelationId(1));
    }

    #[test]
    fn marker_positions_point_at_marker_tokens() {
        let (store, enc, _) = small_model(14);
        let _ = store;
        let m = enc.config.markers();
        for tokens in [vec![1, 2, 3, 4, 5], vec![5, 1, 2, 2, 1, 3]] {
            let i = inst(tokens, (1, 2), (4, 4));
            let seq = insert_entity_markers(&i, m).unwrap();
            assert_eq!(seq.tokens[seq.head_start_pos], m.head_start);
            assert_eq!(seq.tokens[seq.tail_start_pos], m.tail_start);
            assert_eq!(seq.tokens.iter().filter(|&&t| t == m.head_start).count(), 1);
            assert_eq!(seq.tokens.iter().filter(|&&t| t == m.tail_start).count(), 1);
        }
    }
}
