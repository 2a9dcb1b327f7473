//! The two-stage training pipeline and its ablation variants.
//!
//! Per task: extend the head, run stage one, select and merge exemplar
//! memory, run stage two. The full pipeline trains stage one on the new
//! task's data only (fast adaption) and stage two on the balanced memory
//! only (balanced tuning); the ablations replace either stage's training
//! set with the imbalanced mix of previous memory and all new data, or
//! up-sample the old exemplars back to training-set scale.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{Instance, RelationId, Task, TaskStream};
use crate::diagnostics::{boundary_export, confusion_pairs, error_taxonomy, evaluate, ProbeResult};
use crate::error::{CoreError, Result};
use crate::memory::{select_exemplars, MemoryStore};
use crate::model::{
    encode_many, insert_entity_markers, ClassifierHead, EncoderConfig, EncoderParams,
    MarkedSequence,
};
use crate::optim::ParamStore;
use crate::report::{
    BoundarySummary, GradNormSeries, RunReport, RunTimings, TaskReport, REPORT_SCHEMA_VERSION,
};
use crate::rng::{derive_seed, Rng};

const SEED_INIT: u64 = 0x696e_6974;
const SEED_SHUFFLE: u64 = 0x7368_7566;
const SEED_SELECT: u64 = 0x6d65_6d73;
const SEED_PROBES: u64 = 0x7072_6273;

/// Which training sets feed the two stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Stage one on new data, stage two on balanced memory.
    Fea,
    /// Stage one on new data, stage two on previous memory + new data.
    RemoveBt,
    /// Stage one on previous memory + new data, stage two on balanced memory.
    RemoveFa,
    /// Single stage on previous memory + new data.
    RemoveFaBt,
    /// Single stage on up-sampled previous memory + new data.
    UpsampleOnly,
    /// Stage one on new data, stage two on up-sampled previous memory + new data.
    FaUpsample,
    /// All tasks' data at once; the no-forgetting upper bound.
    Supervised,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Fea,
        Variant::RemoveBt,
        Variant::RemoveFa,
        Variant::RemoveFaBt,
        Variant::UpsampleOnly,
        Variant::FaUpsample,
        Variant::Supervised,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Variant::Fea => "fea",
            Variant::RemoveBt => "remove-bt",
            Variant::RemoveFa => "remove-fa",
            Variant::RemoveFaBt => "remove-fa-bt",
            Variant::UpsampleOnly => "upsample-only",
            Variant::FaUpsample => "fa-upsample",
            Variant::Supervised => "supervised",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.label() == s)
            .ok_or_else(|| CoreError::Config(format!("unknown variant {s}")))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs_fa: usize,
    pub epochs_bt: usize,
    pub batch_size: usize,
    pub encoder_lr: f64,
    pub head_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Memory capacity B per relation.
    pub memory_size: usize,
    pub seed: u64,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_fa: 10,
            epochs_bt: 10,
            batch_size: 16,
            encoder_lr: 1e-3,
            head_lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            memory_size: 10,
            seed: 0,
            variant: Variant::Fea,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.memory_size == 0 {
            return Err(CoreError::Config(
                "batch size and memory size must be >= 1".into(),
            ));
        }
        if self.encoder_lr < 0.0 || self.head_lr < 0.0 || self.encoder_lr.max(self.head_lr) == 0.0
        {
            return Err(CoreError::Config("at least one learning rate must be positive".into()));
        }
        Ok(())
    }

    fn base_lr(&self) -> f64 {
        self.encoder_lr.max(self.head_lr)
    }
}

/// Encoder + head + optimizer state of one training run.
pub struct ModelState {
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub head: ClassifierHead,
}

impl ModelState {
    /// Freshly initialized model; the init seed is derived from the run
    /// seed only, so every variant starts from identical weights.
    ///
    /// The embedding table trains at the head rate (per-token state that new
    /// relations must pick up fast); `encoder_lr` governs the transformer
    /// blocks and aggregation layer.
    pub fn init(enc_config: EncoderConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let base = cfg.base_lr();
        let mut store = ParamStore::new();
        let mut rng = Rng::from_seed(derive_seed(&[cfg.seed, SEED_INIT]));
        let encoder = EncoderParams::init(
            enc_config,
            &mut store,
            &mut rng,
            cfg.head_lr / base,
            cfg.encoder_lr / base,
        )?;
        let head = ClassifierHead::new(
            &mut store,
            encoder.config.hidden_width(),
            cfg.head_lr / base,
        );
        Ok(ModelState {
            store,
            encoder,
            head,
        })
    }

    pub fn mark(&self, inst: &Instance) -> Result<MarkedSequence> {
        insert_entity_markers(inst, self.encoder.config.markers())
    }

    pub fn encode_instances(&self, instances: &[&Instance]) -> Result<Vec<Vec<f64>>> {
        let seqs: Vec<MarkedSequence> =
            instances.iter().map(|i| self.mark(i)).collect::<Result<_>>()?;
        encode_many(&self.store, &self.encoder, &seqs)
    }
}

/// Which stage of a task a batch belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StagePhase {
    Stage1,
    Stage2,
}

/// Test instrumentation: observe the exact labels each training batch
/// carries.
#[derive(Default)]
pub struct TrainHooks<'a> {
    #[allow(clippy::type_complexity)]
    pub on_batch: Option<&'a mut dyn FnMut(usize, StagePhase, &[RelationId])>,
}

fn train_stage(
    state: &mut ModelState,
    data: &[&Instance],
    epochs: usize,
    task: usize,
    phase: StagePhase,
    cfg: &TrainConfig,
    hooks: &mut TrainHooks<'_>,
    record_norms: bool,
) -> Result<Vec<f64>> {
    let mut norms = Vec::new();
    if epochs == 0 || data.is_empty() {
        return Ok(norms);
    }
    let seqs: Vec<MarkedSequence> = data.iter().map(|i| state.mark(i)).collect::<Result<_>>()?;
    let mut labels = Vec::with_capacity(data.len());
    for inst in data {
        let class = state.head.class_of(inst.relation).ok_or_else(|| {
            CoreError::Coverage(format!(
                "training instance of uncovered relation id {}",
                inst.relation.0
            ))
        })?;
        labels.push(class as u32);
    }
    let phase_tag = match phase {
        StagePhase::Stage1 => 1u64,
        StagePhase::Stage2 => 2u64,
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..epochs {
        let mut rng = Rng::from_seed(derive_seed(&[
            cfg.seed,
            SEED_SHUFFLE,
            task as u64,
            phase_tag,
            epoch as u64,
        ]));
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let batch_seqs: Vec<&MarkedSequence> = chunk.iter().map(|&i| &seqs[i]).collect();
            let batch_labels: Vec<u32> = chunk.iter().map(|&i| labels[i]).collect();
            if let Some(observe) = hooks.on_batch.as_deref_mut() {
                let rels: Vec<RelationId> = chunk.iter().map(|&i| data[i].relation).collect();
                observe(task, phase, &rels);
            }
            let mut batch = crate::model::encode_batch(&state.store, &state.encoder, &batch_seqs)?;
            let logits = state
                .head
                .logits_node(&mut batch.tape, &state.store, batch.h)?;
            let loss = batch.tape.softmax_cross_entropy(logits, batch_labels)?;
            batch.tape.backward(loss)?;
            batch.tape.accumulate_param_grads(&mut state.store);
            if record_norms {
                norms.push(state.store.grad_l2_norm());
            }
            state
                .store
                .adam_step(cfg.base_lr(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        }
    }
    Ok(norms)
}

/// Stage one of the full pipeline: train on the new task's data only.
pub fn fast_adaption(
    state: &mut ModelState,
    new_data: &[&Instance],
    task: usize,
    cfg: &TrainConfig,
    hooks: &mut TrainHooks<'_>,
) -> Result<()> {
    if new_data.is_empty() {
        return Err(CoreError::EmptyData(format!("task {task} has no training data")));
    }
    train_stage(
        state,
        new_data,
        cfg.epochs_fa,
        task,
        StagePhase::Stage1,
        cfg,
        hooks,
        false,
    )?;
    Ok(())
}

/// Stage two of the full pipeline: train on the balanced memory only,
/// recording the gradient norm of every optimizer step.
pub fn balanced_tuning(
    state: &mut ModelState,
    memory: &MemoryStore,
    task: usize,
    cfg: &TrainConfig,
    hooks: &mut TrainHooks<'_>,
) -> Result<Vec<f64>> {
    for entry in state.head.classes() {
        if !memory.contains(entry.relation) {
            return Err(CoreError::Coverage(format!(
                "memory lacks exemplars for relation id {}",
                entry.relation.0
            )));
        }
    }
    let data: Vec<&Instance> = memory.all_instances();
    train_stage(
        state,
        &data,
        cfg.epochs_bt,
        task,
        StagePhase::Stage2,
        cfg,
        hooks,
        true,
    )
}

/// Select stage-two memory for every relation of the current task with the
/// current (post-stage-one) encoder, then merge.
fn select_and_merge(
    state: &ModelState,
    memory: &mut MemoryStore,
    task: &Task,
    cfg: &TrainConfig,
) -> Result<()> {
    let mut new = BTreeMap::new();
    for &r in &task.relations {
        let instances: Vec<Instance> = task
            .train
            .iter()
            .filter(|i| i.relation == r)
            .cloned()
            .collect();
        let refs: Vec<&Instance> = instances.iter().collect();
        let encodings = state.encode_instances(&refs)?;
        let seed = derive_seed(&[cfg.seed, SEED_SELECT, task.index as u64, r.0 as u64]);
        let exemplars = select_exemplars(&encodings, &instances, cfg.memory_size, seed)?;
        new.insert(r, exemplars);
    }
    memory.merge(new)
}

/// Old exemplars replicated back to roughly one new-relation training-set
/// size each, so a single mixed stage sees balanced label counts.
fn upsample_memory(memory_snapshot: &[Instance], per_relation_target: usize) -> Vec<Instance> {
    let mut by_rel: BTreeMap<RelationId, Vec<&Instance>> = BTreeMap::new();
    for inst in memory_snapshot {
        by_rel.entry(inst.relation).or_default().push(inst);
    }
    let mut out = Vec::new();
    for (_, exemplars) in by_rel {
        let copies = per_relation_target.div_ceil(exemplars.len());
        let mut replicated = Vec::with_capacity(copies * exemplars.len());
        for _ in 0..copies {
            replicated.extend(exemplars.iter().map(|&i| i.clone()));
        }
        replicated.truncate(per_relation_target);
        out.extend(replicated);
    }
    out
}

/// Run one task under the configured variant. Returns the recorded stage-two
/// gradient norms when stage two ran on memory only.
pub fn run_task(
    state: &mut ModelState,
    memory: &mut MemoryStore,
    task: &Task,
    cfg: &TrainConfig,
    hooks: &mut TrainHooks<'_>,
) -> Result<Option<Vec<f64>>> {
    for &r in &task.relations {
        if state.head.class_of(r).is_some() {
            return Err(CoreError::DuplicateRelation(format!(
                "relation id {} already trained",
                r.0
            )));
        }
    }
    state
        .head
        .extend(&mut state.store, &task.relations, task.index)?;

    let new_data: Vec<&Instance> = task.train.iter().collect();
    if new_data.is_empty() {
        return Err(CoreError::EmptyData(format!("task {} has no training data", task.index)));
    }
    // stage-two sets built against the memory as it was before this task
    let previous_memory: Vec<Instance> =
        memory.all_instances().into_iter().cloned().collect();
    let mixed: Vec<&Instance> = previous_memory.iter().chain(task.train.iter()).collect();
    let per_new_relation = task.train.len().div_ceil(task.relations.len());

    // stage one
    match cfg.variant {
        Variant::Fea | Variant::RemoveBt | Variant::FaUpsample => {
            fast_adaption(state, &new_data, task.index, cfg, hooks)?;
        }
        Variant::RemoveFa => {
            train_stage(
                state,
                &mixed,
                cfg.epochs_fa,
                task.index,
                StagePhase::Stage1,
                cfg,
                hooks,
                false,
            )?;
        }
        Variant::RemoveFaBt | Variant::UpsampleOnly => {}
        Variant::Supervised => {
            return Err(CoreError::Config(
                "the supervised variant trains once on all data, not per task".into(),
            ));
        }
    }

    select_and_merge(state, memory, task, cfg)?;

    // stage two
    let norms = match cfg.variant {
        Variant::Fea | Variant::RemoveFa => {
            Some(balanced_tuning(state, memory, task.index, cfg, hooks)?)
        }
        Variant::RemoveBt | Variant::RemoveFaBt => {
            train_stage(
                state,
                &mixed,
                cfg.epochs_bt,
                task.index,
                StagePhase::Stage2,
                cfg,
                hooks,
                false,
            )?;
            None
        }
        Variant::UpsampleOnly | Variant::FaUpsample => {
            let upsampled = upsample_memory(&previous_memory, per_new_relation);
            let data: Vec<&Instance> = upsampled.iter().chain(task.train.iter()).collect();
            train_stage(
                state,
                &data,
                cfg.epochs_bt,
                task.index,
                StagePhase::Stage2,
                cfg,
                hooks,
                false,
            )?;
            None
        }
        Variant::Supervised => unreachable!("rejected above"),
    };
    Ok(norms)
}

/// Diagnostics recorded while a stream runs.
#[derive(Clone, Debug, Default)]
pub struct DiagnosticsPlan {
    /// Pairs whose boundary skew is measured at the end of the task where
    /// the pair's later member appears.
    pub boundary_pairs: Vec<(RelationId, RelationId)>,
    pub probe_ubc: bool,
    pub probe_frozen: bool,
    pub confusion_top: usize,
}

impl DiagnosticsPlan {
    pub fn with_confusions() -> Self {
        DiagnosticsPlan {
            confusion_top: 10,
            ..DiagnosticsPlan::default()
        }
    }
}

/// Train through the whole stream, evaluating on all seen test data after
/// every task. `clock` supplies monotonic seconds for the timing sidecar.
pub fn run_stream(
    stream: &TaskStream,
    enc_config: EncoderConfig,
    cfg: &TrainConfig,
    plan: &DiagnosticsPlan,
    clock: &mut dyn FnMut() -> f64,
) -> Result<(RunReport, RunTimings)> {
    cfg.validate()?;
    if cfg.variant == Variant::Supervised {
        return run_supervised(stream, enc_config, cfg, plan, clock);
    }
    let mut state = ModelState::init(enc_config, cfg)?;
    let mut memory = MemoryStore::new(cfg.memory_size);
    let mut hooks = TrainHooks::default();
    let mut tasks = Vec::with_capacity(stream.tasks.len());
    let mut per_task_seconds = Vec::with_capacity(stream.tasks.len());
    let started = clock();
    for task in &stream.tasks {
        let t0 = clock();
        let norms = run_task(&mut state, &mut memory, task, cfg, &mut hooks)?;
        per_task_seconds.push(clock() - t0);
        tasks.push(task_report(&state, stream, task.index, norms, plan)?);
    }
    let probes = run_probes(&state, stream, cfg, plan)?;
    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        variant: cfg.variant.label().into(),
        seed: cfg.seed,
        memory_size: cfg.memory_size,
        tasks,
        probes,
    };
    let timings = RunTimings {
        total_seconds: clock() - started,
        per_task_seconds,
    };
    Ok((report, timings))
}

fn run_supervised(
    stream: &TaskStream,
    enc_config: EncoderConfig,
    cfg: &TrainConfig,
    plan: &DiagnosticsPlan,
    clock: &mut dyn FnMut() -> f64,
) -> Result<(RunReport, RunTimings)> {
    let mut state = ModelState::init(enc_config, cfg)?;
    let mut hooks = TrainHooks::default();
    let started = clock();
    for task in &stream.tasks {
        state
            .head
            .extend(&mut state.store, &task.relations, task.index)?;
    }
    let all_train: Vec<&Instance> = stream.tasks.iter().flat_map(|t| t.train.iter()).collect();
    train_stage(
        &mut state,
        &all_train,
        cfg.epochs_fa + cfg.epochs_bt,
        0,
        StagePhase::Stage1,
        cfg,
        &mut hooks,
        false,
    )?;
    let total_seconds = clock() - started;
    let mut tasks = Vec::with_capacity(stream.tasks.len());
    for k in 0..stream.tasks.len() {
        tasks.push(task_report(&state, stream, k, None, plan)?);
    }
    let probes = run_probes(&state, stream, cfg, plan)?;
    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        variant: cfg.variant.label().into(),
        seed: cfg.seed,
        memory_size: cfg.memory_size,
        tasks,
        probes,
    };
    let per_task = total_seconds / stream.tasks.len() as f64;
    let timings = RunTimings {
        per_task_seconds: alloc::vec![per_task; stream.tasks.len()],
        total_seconds,
    };
    Ok((report, timings))
}

fn task_report(
    state: &ModelState,
    stream: &TaskStream,
    k: usize,
    norms: Option<Vec<f64>>,
    plan: &DiagnosticsPlan,
) -> Result<TaskReport> {
    let (accuracy, records) = evaluate(state, stream, k)?;
    let taxonomy = error_taxonomy(&records);
    let top_confusions = if plan.confusion_top > 0 {
        confusion_pairs(&records, stream, plan.confusion_top)
    } else {
        Vec::new()
    };
    let mut boundaries = Vec::new();
    for &(a, b) in &plan.boundary_pairs {
        let later = stream.first_task_of(a).max(stream.first_task_of(b));
        if later != k {
            continue;
        }
        let instances: Vec<&Instance> = stream
            .tasks
            .iter()
            .flat_map(|t| t.test.iter())
            .filter(|i| i.relation == a || i.relation == b)
            .collect();
        let export = boundary_export(state, stream, (a, b), &instances)?;
        boundaries.push(BoundarySummary {
            relation_old: export.relation_old.clone(),
            relation_new: export.relation_new.clone(),
            task: k,
            skew_old_as_new: export.skew_old_as_new,
            gold_fit_accuracy: export.gold_fit_accuracy,
        });
    }
    Ok(TaskReport {
        task: k,
        seen_relations: stream.seen_relations(k).len(),
        accuracy,
        taxonomy,
        top_confusions,
        bt_grad_norms: norms.map(GradNormSeries::from_steps),
        boundaries,
    })
}

fn run_probes(
    state: &ModelState,
    stream: &TaskStream,
    cfg: &TrainConfig,
    plan: &DiagnosticsPlan,
) -> Result<Vec<ProbeResult>> {
    let mut probes = Vec::new();
    let seed = derive_seed(&[cfg.seed, SEED_PROBES]);
    if plan.probe_ubc {
        probes.push(crate::diagnostics::ubc_probe(state, stream, seed)?);
    }
    if plan.probe_frozen {
        probes.push(crate::diagnostics::frozen_encoder_supervised(
            state.encoder.config.clone(),
            stream,
            seed,
        )?);
    }
    Ok(probes)
}
