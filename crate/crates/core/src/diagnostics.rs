//! Analysis toolkit: accuracy evaluation, the latter/former/inner error
//! taxonomy, confused-pair ranking, classifier probes over frozen encoders,
//! and 2-D decision-boundary exports.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{Instance, RelationId, TaskStream};
use crate::error::{CoreError, Result};
use crate::model::{argmax_lowest, encode_many, EncoderConfig, EncoderParams, MarkedSequence};
use crate::optim::ParamStore;
use crate::rng::{derive_seed, Rng};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::trainer::ModelState;

const SEED_PROBE: u64 = 0x7072_6f62;

/// Head retraining schedule used by both probes.
pub const PROBE_EPOCHS: usize = 30;
pub const PROBE_LR: f64 = 1e-3;
pub const PROBE_BATCH: usize = 32;

/// One evaluated test instance with the task indices needed by the
/// taxonomy: `gold_task`/`predicted_task` are where the gold and predicted
/// relations first appeared in the stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub instance: usize,
    pub gold: RelationId,
    pub gold_task: usize,
    pub predicted: RelationId,
    pub predicted_task: usize,
}

impl PredictionRecord {
    pub fn is_error(&self) -> bool {
        self.gold != self.predicted
    }
}

/// Error shares over the wrong predictions only. With zero errors every
/// share is reported as zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub total: usize,
    pub errors: usize,
    pub error_rate: f64,
    pub latter_share: f64,
    pub former_share: f64,
    pub inner_share: f64,
}

/// A wrong (gold, predicted) pair with its count and the rate relative to
/// the gold relation's evaluated instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionPair {
    pub gold: String,
    pub predicted: String,
    pub count: usize,
    pub rate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeKind {
    Ubc,
    FrozenEncoder,
}

/// Accuracy of a head retrained over a frozen encoder.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub kind: ProbeKind,
    pub task_stage: usize,
    pub accuracy: f64,
}

/// 2-D projection of a relation pair with fitted linear boundaries for the
/// gold labels and for the model predictions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundaryExport {
    pub relation_old: String,
    pub relation_new: String,
    /// PCA coordinates per instance.
    pub points: Vec<(f64, f64)>,
    /// 1 = the newer relation, per gold label / model prediction.
    pub gold: Vec<u8>,
    pub predicted: Vec<u8>,
    /// (w_x, w_y, b); `w . p + b > 0` is the newer relation's side.
    pub gold_boundary: (f64, f64, f64),
    pub pred_boundary: (f64, f64, f64),
    /// Fraction of gold-old points on the new side of the prediction
    /// boundary -- the boundary-skew number.
    pub skew_old_as_new: f64,
    /// Training accuracy of the gold-label fit.
    pub gold_fit_accuracy: f64,
}

/// Evaluate on the cumulative test data of tasks `0..=k`.
pub fn evaluate(
    state: &ModelState,
    stream: &TaskStream,
    k: usize,
) -> Result<(f64, Vec<PredictionRecord>)> {
    let tests = stream.cumulative_test(k);
    evaluate_instances(state, stream, &tests)
}

/// Evaluate an explicit instance list; every gold relation must be covered
/// by the head.
pub fn evaluate_instances(
    state: &ModelState,
    stream: &TaskStream,
    instances: &[&Instance],
) -> Result<(f64, Vec<PredictionRecord>)> {
    if instances.is_empty() {
        return Err(CoreError::EmptyData("evaluation on zero instances".into()));
    }
    for inst in instances {
        if state.head.class_of(inst.relation).is_none() {
            return Err(CoreError::Coverage(format!(
                "test relation {} not covered by the head",
                stream.relation_name(inst.relation)
            )));
        }
    }
    let seqs: Vec<MarkedSequence> = instances
        .iter()
        .map(|i| state.mark(i))
        .collect::<Result<_>>()?;
    let encodings = encode_many(&state.store, &state.encoder, &seqs)?;
    let mut records = Vec::with_capacity(instances.len());
    let mut correct = 0usize;
    for (idx, (inst, h)) in instances.iter().zip(&encodings).enumerate() {
        let class = state.head.predict_class(&state.store, h)?;
        let predicted = state.head.entry(class).relation;
        if predicted == inst.relation {
            correct += 1;
        }
        records.push(PredictionRecord {
            instance: idx,
            gold: inst.relation,
            gold_task: stream.first_task_of(inst.relation),
            predicted,
            predicted_task: stream.first_task_of(predicted),
        });
    }
    Ok((correct as f64 / instances.len() as f64, records))
}

/// Classify every wrong record by comparing the first-appearance tasks of
/// the gold and predicted relations: latter (`t < t_pred`), former
/// (`t > t_pred`), inner (`t == t_pred`).
pub fn error_taxonomy(records: &[PredictionRecord]) -> Taxonomy {
    let total = records.len();
    let mut latter = 0usize;
    let mut former = 0usize;
    let mut inner = 0usize;
    for r in records.iter().filter(|r| r.is_error()) {
        if r.gold_task < r.predicted_task {
            latter += 1;
        } else if r.gold_task > r.predicted_task {
            former += 1;
        } else {
            inner += 1;
        }
    }
    let errors = latter + former + inner;
    let share = |n: usize| {
        if errors == 0 {
            0.0
        } else {
            n as f64 / errors as f64
        }
    };
    Taxonomy {
        total,
        errors,
        error_rate: if total == 0 {
            0.0
        } else {
            errors as f64 / total as f64
        },
        latter_share: share(latter),
        former_share: share(former),
        inner_share: share(inner),
    }
}

/// Rank wrong (gold, predicted) pairs by count, ties by lexicographic pair
/// name. The rate divides by how many instances of the gold relation were
/// evaluated.
pub fn confusion_pairs(
    records: &[PredictionRecord],
    stream: &TaskStream,
    top_n: usize,
) -> Vec<ConfusionPair> {
    let mut gold_sizes: alloc::collections::BTreeMap<RelationId, usize> = Default::default();
    let mut counts: alloc::collections::BTreeMap<(RelationId, RelationId), usize> =
        Default::default();
    for r in records {
        *gold_sizes.entry(r.gold).or_default() += 1;
        if r.is_error() {
            *counts.entry((r.gold, r.predicted)).or_default() += 1;
        }
    }
    let mut pairs: Vec<ConfusionPair> = counts
        .into_iter()
        .map(|((g, p), count)| ConfusionPair {
            gold: stream.relation_name(g).into(),
            predicted: stream.relation_name(p).into(),
            count,
            rate: count as f64 / gold_sizes[&g] as f64,
        })
        .collect();
    pairs.sort_by(|a, b| {
        b.count
            .cmp(&a.count)
            .then_with(|| a.gold.cmp(&b.gold))
            .then_with(|| a.predicted.cmp(&b.predicted))
    });
    pairs.truncate(top_n);
    pairs
}

/// Train a fresh softmax head over fixed encodings and return its accuracy
/// on the test encodings. The shared Adam optimizer is used throughout.
fn retrain_head_on_encodings(
    train: &[(Vec<f64>, u32)],
    test: &[(Vec<f64>, u32)],
    classes: usize,
    hidden: usize,
    seed: u64,
) -> Result<f64> {
    let mut store = ParamStore::new();
    let w = store.register("probe.w", Tensor::zeros(&[classes, hidden]));
    let order_seed = derive_seed(&[seed, SEED_PROBE]);
    let mut idx: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..PROBE_EPOCHS {
        let mut rng = Rng::from_seed(derive_seed(&[order_seed, epoch as u64]));
        rng.shuffle(&mut idx);
        for chunk in idx.chunks(PROBE_BATCH) {
            let mut flat = Vec::with_capacity(chunk.len() * hidden);
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                flat.extend_from_slice(&train[i].0);
                labels.push(train[i].1);
            }
            let mut tape = Tape::new();
            let h = tape.leaf(Tensor::from_values(&[chunk.len(), hidden], flat)?);
            let wn = tape.param(&store, w);
            let logits = tape.matmul_bt(h, wn)?;
            let loss = tape.softmax_cross_entropy(logits, labels)?;
            tape.backward(loss)?;
            tape.accumulate_param_grads(&mut store);
            store.adam_step(PROBE_LR, 0.9, 0.999, 1e-8);
        }
    }
    let wv = store.value(w);
    let mut correct = 0usize;
    for (h, label) in test {
        let mut scores = Vec::with_capacity(classes);
        for c in 0..classes {
            let row = wv.row(c);
            scores.push(row.iter().zip(h.iter()).map(|(&a, &b)| a * b).sum::<f64>());
        }
        if argmax_lowest(&scores) as u32 == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

fn stream_encodings(
    store: &ParamStore,
    enc: &EncoderParams,
    stream: &TaskStream,
) -> Result<(Vec<(Vec<f64>, u32)>, Vec<(Vec<f64>, u32)>)> {
    let markers = enc.config.markers();
    let class_of: alloc::collections::BTreeMap<RelationId, u32> = stream
        .seen_relations(stream.tasks.len() - 1)
        .into_iter()
        .enumerate()
        .map(|(c, r)| (r, c as u32))
        .collect();
    let encode_split = |pick_test: bool| -> Result<Vec<(Vec<f64>, u32)>> {
        let mut seqs = Vec::new();
        let mut labels = Vec::new();
        for task in &stream.tasks {
            let split = if pick_test { &task.test } else { &task.train };
            for inst in split {
                seqs.push(crate::model::insert_entity_markers(inst, markers)?);
                labels.push(class_of[&inst.relation]);
            }
        }
        let hs = encode_many(store, enc, &seqs)?;
        Ok(hs.into_iter().zip(labels).collect())
    };
    Ok((encode_split(false)?, encode_split(true)?))
}

/// Upper-bound classifier probe: freeze the encoder, discard the head, and
/// retrain a fresh head on every task's training data. The probed state is
/// untouched.
pub fn ubc_probe(state: &ModelState, stream: &TaskStream, seed: u64) -> Result<ProbeResult> {
    let (train, test) = stream_encodings(&state.store, &state.encoder, stream)?;
    let classes = stream.num_relations();
    let hidden = state.encoder.config.hidden_width();
    let accuracy = retrain_head_on_encodings(&train, &test, classes, hidden, seed)?;
    Ok(ProbeResult {
        kind: ProbeKind::Ubc,
        task_stage: stream.tasks.len() - 1,
        accuracy,
    })
}

/// Supervised head over a frozen, freshly initialized (never trained)
/// encoder: isolates how much of the accuracy comes from training the
/// encoder at all.
pub fn frozen_encoder_supervised(
    enc_config: EncoderConfig,
    stream: &TaskStream,
    seed: u64,
) -> Result<ProbeResult> {
    let mut store = ParamStore::new();
    let mut rng = Rng::from_seed(derive_seed(&[seed, SEED_PROBE, 1]));
    let enc = EncoderParams::init(enc_config, &mut store, &mut rng, 1.0, 1.0)?;
    let (train, test) = stream_encodings(&store, &enc, stream)?;
    let classes = stream.num_relations();
    let hidden = enc.config.hidden_width();
    let accuracy = retrain_head_on_encodings(&train, &test, classes, hidden, seed)?;
    Ok(ProbeResult {
        kind: ProbeKind::FrozenEncoder,
        task_stage: stream.tasks.len() - 1,
        accuracy,
    })
}

/// Symmetric eigen-decomposition by cyclic Jacobi sweeps. Returns
/// (eigenvalues, row-major eigenvector matrix with eigenvectors in rows).
fn jacobi_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..64 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-30 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + crate::mathx::sqrt(1.0 + theta * theta))
                } else {
                    1.0 / (theta - crate::mathx::sqrt(1.0 + theta * theta))
                };
                let c = 1.0 / crate::mathx::sqrt(1.0 + t * t);
                let s = t * c;
                for i in 0..n {
                    let aip = a[i * n + p];
                    let aiq = a[i * n + q];
                    a[i * n + p] = c * aip - s * aiq;
                    a[i * n + q] = s * aip + c * aiq;
                }
                for j in 0..n {
                    let apj = a[p * n + j];
                    let aqj = a[q * n + j];
                    a[p * n + j] = c * apj - s * aqj;
                    a[q * n + j] = s * apj + c * aqj;
                }
                for i in 0..n {
                    let vip = v[i * n + p];
                    let viq = v[i * n + q];
                    v[i * n + p] = c * vip - s * viq;
                    v[i * n + q] = s * vip + c * viq;
                }
            }
        }
    }
    let eigenvalues: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    // transpose V so eigenvectors are rows
    let mut rows = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            rows[j * n + i] = v[i * n + j];
        }
    }
    (eigenvalues, rows)
}

/// PCA projection of centered points onto their top two principal axes.
/// The projected cloud has zero empirical mean per axis; each axis's sign
/// is fixed so its largest-magnitude loading is positive.
pub fn pca_2d(points: &[Vec<f64>]) -> Result<Vec<(f64, f64)>> {
    if points.len() < 2 {
        return Err(CoreError::Size("pca needs at least 2 points".into()));
    }
    let d = points[0].len();
    let n = points.len();
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, &x) in mean.iter_mut().zip(p) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    for p in points {
        for i in 0..d {
            let ci = p[i] - mean[i];
            for j in i..d {
                cov[i * d + j] += ci * (p[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i * d + j] /= n as f64;
            cov[j * d + i] = cov[i * d + j];
        }
    }
    let (eigenvalues, vectors) = jacobi_eigen(cov, d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eigenvalues[j].total_cmp(&eigenvalues[i]).then(i.cmp(&j)));
    let mut axes = [vec![0.0; d], vec![0.0; d]];
    for (k, axis) in axes.iter_mut().enumerate() {
        axis.copy_from_slice(&vectors[order[k] * d..(order[k] + 1) * d]);
        let lead = (0..d)
            .max_by(|&i, &j| axis[i].abs().total_cmp(&axis[j].abs()))
            .unwrap_or(0);
        if axis[lead] < 0.0 {
            axis.iter_mut().for_each(|x| *x = -*x);
        }
    }
    Ok(points
        .iter()
        .map(|p| {
            let mut x = 0.0;
            let mut y = 0.0;
            for i in 0..d {
                let c = p[i] - mean[i];
                x += c * axes[0][i];
                y += c * axes[1][i];
            }
            (x, y)
        })
        .collect())
}

/// Fit a 2-class logistic regression in 2-D with the shared Adam optimizer;
/// returns (w_x, w_y, b) where positive side = class 1, plus training
/// accuracy of the fit. Full-batch and zero-initialized, so deterministic.
fn fit_logistic_2d(points: &[(f64, f64)], labels: &[u8]) -> Result<((f64, f64, f64), f64)> {
    let mut store = ParamStore::new();
    let w = store.register("boundary.w", Tensor::zeros(&[2, 3]));
    let n = points.len();
    let mut flat = Vec::with_capacity(n * 3);
    for &(x, y) in points {
        flat.extend_from_slice(&[x, y, 1.0]);
    }
    let feats = Tensor::from_values(&[n, 3], flat)?;
    let labels_u32: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
    for _epoch in 0..200 {
        let mut tape = Tape::new();
        let x = tape.leaf(feats.clone());
        let wn = tape.param(&store, w);
        let logits = tape.matmul_bt(x, wn)?;
        let loss = tape.softmax_cross_entropy(logits, labels_u32.clone())?;
        tape.backward(loss)?;
        tape.accumulate_param_grads(&mut store);
        store.adam_step(0.1, 0.9, 0.999, 1e-8);
    }
    let wv = store.value(w);
    let (r0, r1) = (wv.row(0).to_vec(), wv.row(1).to_vec());
    let boundary = (r1[0] - r0[0], r1[1] - r0[1], r1[2] - r0[2]);
    let mut correct = 0usize;
    for (&(x, y), &l) in points.iter().zip(labels) {
        let side = boundary.0 * x + boundary.1 * y + boundary.2 > 0.0;
        if side == (l == 1) {
            correct += 1;
        }
    }
    Ok((boundary, correct as f64 / n as f64))
}

/// Project a relation pair's instances to 2-D and fit linear boundaries for
/// the gold labels and for the model predictions. The pair is ordered by
/// first appearance; predictions of any third relation count as "not the
/// newer relation".
pub fn boundary_export(
    state: &ModelState,
    stream: &TaskStream,
    pair: (RelationId, RelationId),
    instances: &[&Instance],
) -> Result<BoundaryExport> {
    let (a, b) = pair;
    let (rel_old, rel_new) = if stream.first_task_of(a) <= stream.first_task_of(b) {
        (a, b)
    } else {
        (b, a)
    };
    for r in [rel_old, rel_new] {
        if state.head.class_of(r).is_none() {
            return Err(CoreError::Coverage(format!(
                "relation {} not covered by the head",
                stream.relation_name(r)
            )));
        }
    }
    for inst in instances {
        if inst.relation != rel_old && inst.relation != rel_new {
            return Err(CoreError::Coverage(format!(
                "instance of {} in a boundary export of another pair",
                stream.relation_name(inst.relation)
            )));
        }
    }
    let n_old = instances.iter().filter(|i| i.relation == rel_old).count();
    let n_new = instances.len() - n_old;
    if n_old < 2 || n_new < 2 {
        return Err(CoreError::Size(format!(
            "boundary export needs >= 2 instances per relation, got {n_old} and {n_new}"
        )));
    }

    let seqs: Vec<MarkedSequence> = instances
        .iter()
        .map(|i| state.mark(i))
        .collect::<Result<_>>()?;
    let encodings = encode_many(&state.store, &state.encoder, &seqs)?;
    let gold: Vec<u8> = instances
        .iter()
        .map(|i| u8::from(i.relation == rel_new))
        .collect();
    let mut predicted = Vec::with_capacity(instances.len());
    for h in &encodings {
        let class = state.head.predict_class(&state.store, h)?;
        predicted.push(u8::from(state.head.entry(class).relation == rel_new));
    }
    let points = pca_2d(&encodings)?;
    let (gold_boundary, gold_fit_accuracy) = fit_logistic_2d(&points, &gold)?;
    let (pred_boundary, _) = fit_logistic_2d(&points, &predicted)?;
    let mut old_total = 0usize;
    let mut old_on_new_side = 0usize;
    for (&(x, y), &g) in points.iter().zip(&gold) {
        if g == 0 {
            old_total += 1;
            if pred_boundary.0 * x + pred_boundary.1 * y + pred_boundary.2 > 0.0 {
                old_on_new_side += 1;
            }
        }
    }
    Ok(BoundaryExport {
        relation_old: stream.relation_name(rel_old).into(),
        relation_new: stream.relation_name(rel_new).into(),
        points,
        gold,
        predicted,
        gold_boundary,
        pred_boundary,
        skew_old_as_new: old_on_new_side as f64 / old_total as f64,
        gold_fit_accuracy,
    })
}
