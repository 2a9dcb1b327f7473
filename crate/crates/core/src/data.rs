//! Corpora, class-incremental task streams, and the seeded synthetic
//! stream generator.
//!
//! A synthetic relation is a latent template: two signature tokens placed
//! directly around the entity slots plus one distinguishing token after the
//! first entity, with uniform background tokens elsewhere. "Similar pair"
//! relations share both signature tokens and differ only in the
//! distinguishing token, and the two members are planted in different tasks
//! so that cross-task confusion between them can be studied.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::{derive_seed, Rng};

const SEED_TASK_ASSIGN: u64 = 0x7461_736b;
const SEED_INSTANCES: u64 = 0x696e_7374;
const SEED_SPLIT: u64 = 0x73706c69;

/// Index into a stream's relation inventory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelationId(pub u32);

/// Inclusive token span.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end < self.start
    }

    fn overlaps(&self, other: &Span) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

/// One labeled example: tokens, head/tail entity spans, relation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub tokens: Vec<u32>,
    pub head: Span,
    pub tail: Span,
    pub relation: RelationId,
}

impl Instance {
    pub fn validate(&self) -> Result<()> {
        for (name, span) in [("head", &self.head), ("tail", &self.tail)] {
            if span.is_empty() {
                return Err(CoreError::Span(format!(
                    "{name} span ({}, {}) is empty",
                    span.start, span.end
                )));
            }
            if span.end >= self.tokens.len() {
                return Err(CoreError::Span(format!(
                    "{name} span ({}, {}) out of bounds for {} tokens",
                    span.start,
                    span.end,
                    self.tokens.len()
                )));
            }
        }
        if self.head.overlaps(&self.tail) {
            return Err(CoreError::Span(format!(
                "head ({}, {}) overlaps tail ({}, {})",
                self.head.start, self.head.end, self.tail.start, self.tail.end
            )));
        }
        Ok(())
    }
}

/// One task of the stream: its relation set and splits.
#[derive(Clone, Debug)]
pub struct Task {
    pub index: usize,
    pub relations: Vec<RelationId>,
    pub train: Vec<Instance>,
    pub validation: Vec<Instance>,
    pub test: Vec<Instance>,
}

/// Ordered tasks with disjoint relation sets plus the relation inventory.
#[derive(Clone, Debug)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    /// Relation id -> display name.
    pub relation_names: Vec<String>,
    /// Relation id -> task where it first (and only) appears.
    pub first_task: Vec<usize>,
    /// Size of the corpus token space; marker tokens come on top of this.
    pub token_vocab: usize,
}

impl TaskStream {
    pub fn num_relations(&self) -> usize {
        self.relation_names.len()
    }

    pub fn relation_name(&self, r: RelationId) -> &str {
        &self.relation_names[r.0 as usize]
    }

    pub fn first_task_of(&self, r: RelationId) -> usize {
        self.first_task[r.0 as usize]
    }

    /// Relations of tasks `0..=k`, in task order then id order.
    pub fn seen_relations(&self, k: usize) -> Vec<RelationId> {
        let mut out = Vec::new();
        for task in &self.tasks[..=k] {
            out.extend(task.relations.iter().copied());
        }
        out
    }

    /// Test instances of all tasks up to and including `k`.
    pub fn cumulative_test(&self, k: usize) -> Vec<&Instance> {
        self.tasks[..=k]
            .iter()
            .flat_map(|t| t.test.iter())
            .collect()
    }

    /// Check the structural invariants: disjoint relation sets, splits that
    /// carry only their task's relations, a consistent first-task map.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.relation_names.len()];
        for task in &self.tasks {
            for &r in &task.relations {
                if seen[r.0 as usize] {
                    return Err(CoreError::DuplicateRelation(
                        self.relation_name(r).into(),
                    ));
                }
                seen[r.0 as usize] = true;
                if self.first_task[r.0 as usize] != task.index {
                    return Err(CoreError::Config(format!(
                        "first-task map disagrees with stream order for {}",
                        self.relation_name(r)
                    )));
                }
            }
            for inst in task.train.iter().chain(&task.validation).chain(&task.test) {
                inst.validate()?;
                if !task.relations.contains(&inst.relation) {
                    return Err(CoreError::Config(format!(
                        "instance of {} stored in task {}",
                        self.relation_name(inst.relation),
                        task.index
                    )));
                }
            }
        }
        if seen.iter().any(|&s| !s) {
            return Err(CoreError::Config("inventory relation missing from stream".into()));
        }
        Ok(())
    }
}

/// Loaded corpus prior to task partitioning.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub instances: Vec<Instance>,
    pub relation_names: Vec<String>,
    pub token_vocab: usize,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SplitRatio {
    pub train: u32,
    pub validation: u32,
    pub test: u32,
}

impl Default for SplitRatio {
    fn default() -> Self {
        SplitRatio {
            train: 3,
            validation: 1,
            test: 1,
        }
    }
}

/// Optional per-relation instance caps applied after splitting.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct RelationCaps {
    pub train: Option<usize>,
    pub test: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct StreamConfig {
    pub tasks: usize,
    pub split: SplitRatio,
    pub caps: RelationCaps,
    pub seed: u64,
}

/// Partition a corpus into a `K`-task class-incremental stream: relations
/// are shuffled by the seed and dealt into near-equal sets (earlier tasks
/// take the extras), then each relation's instances are split by the ratio.
pub fn build_task_stream(corpus: &Corpus, cfg: &StreamConfig) -> Result<TaskStream> {
    let n_rel = corpus.relation_names.len();
    if cfg.tasks == 0 || cfg.tasks > n_rel {
        return Err(CoreError::Config(format!(
            "cannot split {n_rel} relations into {} tasks",
            cfg.tasks
        )));
    }
    let ratio_sum = cfg.split.train + cfg.split.validation + cfg.split.test;
    if cfg.split.train == 0 || cfg.split.test == 0 {
        return Err(CoreError::Config("split ratio needs train and test parts".into()));
    }

    let mut order: Vec<u32> = (0..n_rel as u32).collect();
    let mut rng = Rng::from_seed(derive_seed(&[cfg.seed, SEED_TASK_ASSIGN]));
    rng.shuffle(&mut order);

    let base = n_rel / cfg.tasks;
    let extra = n_rel % cfg.tasks;
    let mut per_task: Vec<Vec<RelationId>> = Vec::with_capacity(cfg.tasks);
    let mut cursor = 0;
    for t in 0..cfg.tasks {
        let take = base + usize::from(t < extra);
        let mut rels: Vec<RelationId> =
            order[cursor..cursor + take].iter().map(|&r| RelationId(r)).collect();
        rels.sort_unstable();
        per_task.push(rels);
        cursor += take;
    }

    // Group instances per relation in file order.
    let mut by_rel: Vec<Vec<Instance>> = vec![Vec::new(); n_rel];
    for inst in &corpus.instances {
        by_rel[inst.relation.0 as usize].push(inst.clone());
    }

    let mut first_task = vec![0usize; n_rel];
    let mut tasks = Vec::with_capacity(cfg.tasks);
    for (t, rels) in per_task.into_iter().enumerate() {
        let mut task = Task {
            index: t,
            relations: rels,
            train: Vec::new(),
            validation: Vec::new(),
            test: Vec::new(),
        };
        for &r in &task.relations {
            first_task[r.0 as usize] = t;
            let mut insts = by_rel[r.0 as usize].clone();
            if insts.is_empty() {
                return Err(CoreError::EmptyData(format!(
                    "relation {} has no instances",
                    corpus.relation_names[r.0 as usize]
                )));
            }
            let mut split_rng = Rng::from_seed(derive_seed(&[cfg.seed, SEED_SPLIT, r.0 as u64]));
            split_rng.shuffle(&mut insts);
            let n = insts.len();
            let n_train = n * cfg.split.train as usize / ratio_sum as usize;
            let n_val = n * cfg.split.validation as usize / ratio_sum as usize;
            let mut train: Vec<Instance> = insts.drain(..n_train).collect();
            let validation: Vec<Instance> = insts.drain(..n_val).collect();
            let mut test = insts;
            if let Some(cap) = cfg.caps.train {
                train.truncate(cap);
            }
            if let Some(cap) = cfg.caps.test {
                test.truncate(cap);
            }
            task.train.extend(train);
            task.validation.extend(validation);
            task.test.extend(test);
        }
        tasks.push(task);
    }

    let stream = TaskStream {
        tasks,
        relation_names: corpus.relation_names.clone(),
        first_task,
        token_vocab: corpus.token_vocab,
    };
    stream.validate()?;
    Ok(stream)
}

/// Configuration of the seeded synthetic stream generator.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub relations: usize,
    pub tasks: usize,
    pub train_per_relation: usize,
    pub test_per_relation: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub similar_pairs: usize,
    /// Task placement of each pair's (earlier, later) member; defaults to
    /// spreading pairs half a stream apart.
    pub pair_tasks: Option<Vec<(usize, usize)>>,
    /// Probability that either signature token is replaced by background.
    pub noise_rate: f64,
    /// Drop-out rate of the distinguishing token for ordinary relations.
    /// Instances that lose it are still identified by their signature
    /// combination, but only through a weak conjunction feature -- the
    /// contested band where class priors matter.
    pub disc_dropout: f64,
    /// Drop-out rate of the distinguishing token for planted-pair members.
    /// Instances that lose it are genuinely ambiguous within the pair, which
    /// is what makes the pair "similar" for a learner while a position-aware
    /// oracle stays accurate on the rest.
    pub pair_disc_noise: f64,
    /// Probability that an instance carries one other relation's
    /// distinguishing token in a random background slot. The confuser never
    /// lands on a template position, so a position-aware rule is immune, but
    /// it plants weak false evidence that a prior-skewed classifier follows.
    pub confuser_rate: f64,
    /// Probability that an instance's distinguishing token is swapped for
    /// that of a signature-sharing relation. The signature combination still
    /// identifies the true relation, so these instances sit on the contested
    /// frontier between similar relations: correctly resolved by a balanced
    /// classifier, tipped over by a prior-skewed one.
    pub disc_swap_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            relations: 40,
            tasks: 10,
            train_per_relation: 100,
            test_per_relation: 20,
            vocab_size: 200,
            seq_len: 16,
            similar_pairs: 6,
            pair_tasks: None,
            noise_rate: 0.03,
            disc_dropout: 0.2,
            pair_disc_noise: 0.12,
            confuser_rate: 0.5,
            disc_swap_rate: 0.15,
            seed: 0,
        }
    }
}

/// A relation's latent generative pattern.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RelationTemplate {
    /// Placed directly before the first entity slot.
    pub sig_a: u32,
    /// Placed directly after the first entity slot.
    pub disc: u32,
    /// Placed directly after the second entity slot.
    pub sig_b: u32,
}

impl SyntheticConfig {
    /// Pair members are always the lowest relation ids: pair `i` is
    /// `(2i, 2i+1)` with `2i` planted in the earlier task.
    pub fn planted_pairs(&self) -> Vec<(RelationId, RelationId)> {
        (0..self.similar_pairs)
            .map(|i| (RelationId(2 * i as u32), RelationId(2 * i as u32 + 1)))
            .collect()
    }

    /// Task indices for each planted pair.
    pub fn pair_task_placement(&self) -> Result<Vec<(usize, usize)>> {
        if let Some(placement) = &self.pair_tasks {
            if placement.len() != self.similar_pairs {
                return Err(CoreError::Config(format!(
                    "pair_tasks lists {} placements for {} pairs",
                    placement.len(),
                    self.similar_pairs
                )));
            }
            for &(a, b) in placement {
                if a == b || a >= self.tasks || b >= self.tasks {
                    return Err(CoreError::Config(format!(
                        "pair placement ({a}, {b}) invalid for {} tasks",
                        self.tasks
                    )));
                }
            }
            return Ok(placement.clone());
        }
        if self.similar_pairs > 0 && self.tasks < 2 {
            return Err(CoreError::Config(
                "similar pairs need at least two tasks".into(),
            ));
        }
        // Earlier members near the front, later members packed into the
        // last few tasks so the end-of-stream evaluation always sees
        // recently arrived similar relations.
        let span = 3.min(self.tasks - 1);
        Ok((0..self.similar_pairs)
            .map(|i| (i % (self.tasks - span), self.tasks - 1 - (i % span)))
            .collect())
    }

    fn validate(&self) -> Result<()> {
        let mut problems: Vec<String> = Vec::new();
        if self.relations == 0 || self.tasks == 0 {
            problems.push("relations and tasks must be positive".into());
        } else if self.relations % self.tasks != 0 {
            problems.push(format!(
                "relation count {} not divisible by task count {}",
                self.relations, self.tasks
            ));
        }
        if 2 * self.similar_pairs > self.relations {
            problems.push(format!(
                "{} similar pairs exceed {} relations",
                self.similar_pairs, self.relations
            ));
        }
        if self.train_per_relation == 0 || self.test_per_relation == 0 {
            problems.push("train/test instances per relation must be positive".into());
        }
        if self.seq_len < 8 {
            problems.push(format!("sequence length {} below minimum 8", self.seq_len));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            problems.push(format!("noise rate {} outside [0, 1)", self.noise_rate));
        }
        if !(0.0..1.0).contains(&self.confuser_rate) {
            problems.push(format!(
                "confuser rate {} outside [0, 1)",
                self.confuser_rate
            ));
        }
        if !(0.0..1.0).contains(&self.pair_disc_noise) {
            problems.push(format!(
                "pair disc noise {} outside [0, 1)",
                self.pair_disc_noise
            ));
        }
        if !(0.0..1.0).contains(&self.disc_dropout) {
            problems.push(format!(
                "disc dropout {} outside [0, 1)",
                self.disc_dropout
            ));
        }
        if !(0.0..1.0).contains(&self.disc_swap_rate) {
            problems.push(format!(
                "disc swap rate {} outside [0, 1)",
                self.disc_swap_rate
            ));
        }
        if !problems.is_empty() {
            return Err(CoreError::Config(problems.join("; ")));
        }
        Ok(())
    }

    /// Unique signature combinations needed: planted pairs share theirs.
    fn combos(&self) -> usize {
        self.relations - self.similar_pairs
    }

    /// Signature pool sized so each pool token is shared by about four
    /// relations; the overlap is what makes relations mutually confusable
    /// when slots drop out.
    fn sig_pool(&self) -> usize {
        let by_sharing = 2 * self.combos() / 4;
        by_sharing.max(4)
    }

    fn vocab_regions(&self) -> Result<VocabRegions> {
        let pool = self.sig_pool();
        if pool * (pool - 1) < self.combos() {
            return Err(CoreError::Config(format!(
                "signature pool of {pool} cannot form {} distinct combinations",
                self.combos()
            )));
        }
        let sig_needed = pool + self.relations;
        if self.vocab_size < sig_needed + 8 {
            return Err(CoreError::Config(format!(
                "vocab of {} too small for {} distinct signature tokens",
                self.vocab_size, sig_needed
            )));
        }
        let free = self.vocab_size - sig_needed;
        // A small background pool keeps class clouds compact enough for ten
        // exemplars to summarize, while a large entity pool leaves room for
        // instance-specific patterns a big-enough model can memorize.
        let background = (free / 2).min(12);
        let entity_len = (free - background).min(64);
        Ok(VocabRegions {
            background,
            entity_start: background,
            entity_len,
            sig_start: free,
            sig_pool: pool,
        })
    }
}

struct VocabRegions {
    background: usize,
    entity_start: usize,
    entity_len: usize,
    sig_start: usize,
    sig_pool: usize,
}

/// Per-relation templates for a config; pure in the config.
///
/// Signature tokens come from a shared pool: each relation is an ordered
/// (sig_a, sig_b) combination, unique per relation except that planted-pair
/// members share theirs, plus a relation-unique distinguishing token from
/// the rare tail of the vocabulary.
pub fn synthetic_templates(cfg: &SyntheticConfig) -> Result<Vec<RelationTemplate>> {
    cfg.validate()?;
    let regions = cfg.vocab_regions()?;
    let pool = regions.sig_pool;
    let combo = |c: usize| -> (u32, u32) {
        let a = c % pool;
        let b = (a + 1 + c / pool) % pool;
        (
            (regions.sig_start + a) as u32,
            (regions.sig_start + b) as u32,
        )
    };
    let mut sigs: Vec<(u32, u32)> = Vec::with_capacity(cfg.relations);
    for i in 0..cfg.similar_pairs {
        sigs.push(combo(i));
        sigs.push(combo(i));
    }
    for r in 2 * cfg.similar_pairs..cfg.relations {
        sigs.push(combo(r - cfg.similar_pairs));
    }
    let disc_start = regions.sig_start + pool;
    let templates = sigs
        .into_iter()
        .enumerate()
        .map(|(r, (sig_a, sig_b))| RelationTemplate {
            sig_a,
            disc: (disc_start + r) as u32,
            sig_b,
        })
        .collect();
    Ok(templates)
}

/// One designated swap target per relation: a signature-sharing relation
/// from an earlier task when one exists (earliest task, then lowest id).
/// Concentrating every relation's swapped instances on one earlier victim
/// is what creates the cross-task contest between plentiful new data and
/// the victim's few memory exemplars. Planted-pair members are exempt.
fn swap_targets(
    cfg: &SyntheticConfig,
    templates: &[RelationTemplate],
    first_task: &[usize],
) -> Vec<Option<u32>> {
    (0..cfg.relations)
        .map(|r| {
            if r < 2 * cfg.similar_pairs {
                return None;
            }
            let tr = &templates[r];
            let shares = |o: usize| {
                let to = &templates[o];
                tr.sig_a == to.sig_a
                    || tr.sig_a == to.sig_b
                    || tr.sig_b == to.sig_a
                    || tr.sig_b == to.sig_b
            };
            let mut best: Option<u32> = None;
            let mut best_key = (usize::MAX, usize::MAX);
            for o in 0..cfg.relations {
                if o == r || !shares(o) {
                    continue;
                }
                // earlier-task sharers first, then anything sharing
                let key = if first_task[o] < first_task[r] {
                    (first_task[o], o)
                } else {
                    (usize::MAX - 1, o)
                };
                if key < best_key {
                    best_key = key;
                    best = Some(o as u32);
                }
            }
            best
        })
        .collect()
}

/// Signature token positions implied by an instance's entity spans.
pub fn template_positions(inst: &Instance) -> (usize, usize, usize) {
    let (first, second) = if inst.head.start < inst.tail.start {
        (&inst.head, &inst.tail)
    } else {
        (&inst.tail, &inst.head)
    };
    (first.start - 1, first.end + 1, second.end + 1)
}

/// Generate a full task stream from a synthetic config. Pure: the same
/// config yields the same stream bit for bit.
pub fn generate_synthetic_stream(cfg: &SyntheticConfig) -> Result<TaskStream> {
    cfg.validate()?;
    let templates = synthetic_templates(cfg)?;
    let regions = cfg.vocab_regions()?;
    let placement = cfg.pair_task_placement()?;

    // Assign relations to tasks: pair members pinned, the rest dealt from a
    // seeded shuffle into the remaining capacity.
    let per_task = cfg.relations / cfg.tasks;
    let mut slots: Vec<Vec<RelationId>> = vec![Vec::new(); cfg.tasks];
    for (i, &(a, b)) in placement.iter().enumerate() {
        slots[a].push(RelationId(2 * i as u32));
        slots[b].push(RelationId(2 * i as u32 + 1));
    }
    if let Some(overfull) = slots.iter().position(|s| s.len() > per_task) {
        return Err(CoreError::Config(format!(
            "pair placement overfills task {overfull} ({} > {per_task} relations)",
            slots[overfull].len()
        )));
    }
    let mut rest: Vec<u32> = (2 * cfg.similar_pairs as u32..cfg.relations as u32).collect();
    let mut assign_rng = Rng::from_seed(derive_seed(&[cfg.seed, SEED_TASK_ASSIGN]));
    assign_rng.shuffle(&mut rest);
    let mut rest = rest.into_iter();
    for slot in &mut slots {
        while slot.len() < per_task {
            slot.push(RelationId(rest.next().expect("relation counts balance")));
        }
        slot.sort_unstable();
    }

    let mut first_task = vec![0usize; cfg.relations];
    for (t, rels) in slots.iter().enumerate() {
        for &r in rels {
            first_task[r.0 as usize] = t;
        }
    }
    let swap_targets = swap_targets(cfg, &templates, &first_task);

    let mut tasks = Vec::with_capacity(cfg.tasks);
    for (t, rels) in slots.into_iter().enumerate() {
        let mut task = Task {
            index: t,
            relations: rels,
            train: Vec::new(),
            validation: Vec::new(),
            test: Vec::new(),
        };
        for &r in &task.relations {
            let paired = (r.0 as usize) < 2 * cfg.similar_pairs;
            let mut rng = Rng::from_seed(derive_seed(&[cfg.seed, SEED_INSTANCES, r.0 as u64]));
            for i in 0..cfg.train_per_relation + cfg.test_per_relation {
                let inst = synth_instance(
                    cfg,
                    &regions,
                    &templates,
                    swap_targets[r.0 as usize],
                    r,
                    paired,
                    &mut rng,
                );
                if i < cfg.train_per_relation {
                    task.train.push(inst);
                } else {
                    task.test.push(inst);
                }
            }
        }
        tasks.push(task);
    }

    let width = if cfg.relations > 100 { 3 } else { 2 };
    let relation_names = (0..cfg.relations)
        .map(|r| format!("rel_{r:0width$}"))
        .collect();
    let stream = TaskStream {
        tasks,
        relation_names,
        first_task,
        token_vocab: cfg.vocab_size,
    };
    stream.validate()?;
    Ok(stream)
}

fn synth_instance(
    cfg: &SyntheticConfig,
    regions: &VocabRegions,
    templates: &[RelationTemplate],
    swap_target: Option<u32>,
    relation: RelationId,
    paired: bool,
    rng: &mut Rng,
) -> Instance {
    let template = &templates[relation.0 as usize];
    let len = cfg.seq_len;
    let first_len = 1 + rng.below(2);
    let second_len = 1 + rng.below(2);
    // Layout: [gap1] sig_a FIRST disc [gap2] SECOND sig_b [gap3]
    let fixed = 1 + first_len + 1 + second_len + 1;
    let slack = len - fixed;
    let gap1 = rng.below(slack + 1);
    let gap2 = rng.below(slack - gap1 + 1);

    let mut tokens: Vec<u32> = Vec::with_capacity(len);
    let mut bg_slots: Vec<usize> = Vec::with_capacity(slack);
    let push_background = |tokens: &mut Vec<u32>, bg: &mut Vec<usize>, rng: &mut Rng| {
        bg.push(tokens.len());
        tokens.push(rng.below(regions.background) as u32);
    };
    for _ in 0..gap1 {
        push_background(&mut tokens, &mut bg_slots, rng);
    }
    let sig_a_pos = tokens.len();
    tokens.push(template.sig_a);
    let first_start = tokens.len();
    for _ in 0..first_len {
        tokens.push((regions.entity_start + rng.below(regions.entity_len)) as u32);
    }
    let disc_pos = tokens.len();
    tokens.push(template.disc);
    for _ in 0..gap2 {
        push_background(&mut tokens, &mut bg_slots, rng);
    }
    let second_start = tokens.len();
    for _ in 0..second_len {
        tokens.push((regions.entity_start + rng.below(regions.entity_len)) as u32);
    }
    let sig_b_pos = tokens.len();
    tokens.push(template.sig_b);
    while tokens.len() < len {
        push_background(&mut tokens, &mut bg_slots, rng);
    }

    // Contested-frontier instances: the designated target's distinguishing
    // token stands in for the real one; the signature combination still
    // identifies the truth.
    if let Some(target) = swap_target {
        if rng.next_f64() < cfg.disc_swap_rate {
            tokens[disc_pos] = templates[target as usize].disc;
        }
    }

    // Template noise draws from the plain background region only, so a
    // corrupted slot never fakes another relation's signature. The
    // distinguishing slot has its own dropout: pair members lose it at the
    // pair rate, everyone else at the general rate.
    let disc_noise = if paired {
        cfg.pair_disc_noise
    } else {
        cfg.disc_dropout
    };
    for (pos, p) in [
        (sig_a_pos, cfg.noise_rate),
        (disc_pos, disc_noise),
        (sig_b_pos, cfg.noise_rate),
    ] {
        if rng.next_f64() < p {
            tokens[pos] = rng.below(regions.background) as u32;
        }
    }

    // Weak false evidence: the designated target's distinguishing token
    // dropped into a background slot, away from the template positions.
    // Pair members point at their partner instead.
    let confuser = swap_target.or(if paired {
        Some(relation.0 ^ 1)
    } else {
        None
    });
    if let Some(other) = confuser {
        if !bg_slots.is_empty() && rng.next_f64() < cfg.confuser_rate {
            let slot = bg_slots[rng.below(bg_slots.len())];
            tokens[slot] = templates[other as usize].disc;
        }
    }

    let first = Span::new(first_start, first_start + first_len - 1);
    let second = Span::new(second_start, second_start + second_len - 1);
    let (head, tail) = if rng.below(2) == 0 {
        (first, second)
    } else {
        (second, first)
    };
    Instance {
        tokens,
        head,
        tail,
        relation,
    }
}
